import logging

import click
from dotenv import load_dotenv

load_dotenv()

from api.balance import balance  # noqa: E402
from api.builtin import builtin  # noqa: E402
from api.casimir import casimir  # noqa: E402
from api.simulate import simulate  # noqa: E402
from api.stokes_check import stokes_check  # noqa: E402
from api.vardiff import vardiff  # noqa: E402
from api.verify import verify  # noqa: E402
from utils.config import get_settings  # noqa: E402

logger = logging.getLogger(__name__)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="DEBUG logging")
def cli(verbose: bool):
    """Port-Hamiltonian PDE workbench: structural checks, power balance, Casimirs and simulation."""
    level = "DEBUG" if verbose else get_settings().log_level.upper()
    logging.basicConfig(level=level)
    logger.debug(f"Log level {level}")


cli.add_command(verify)
cli.add_command(vardiff)
cli.add_command(balance)
cli.add_command(casimir)
cli.add_command(simulate)
cli.add_command(stokes_check)
cli.add_command(builtin)


if __name__ == "__main__":
    cli()
