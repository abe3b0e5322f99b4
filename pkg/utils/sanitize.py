from enum import Enum

import numpy as np
import pandas as pd
import sympy as sp
from pydantic import BaseModel

from services.expr_core import render


def sanitize_for_json(obj):
    if isinstance(obj, Enum):
        return obj.value
    elif isinstance(obj, BaseModel):
        return {name: sanitize_for_json(getattr(obj, name)) for name in type(obj).model_fields}
    elif isinstance(obj, dict):
        return {str(k): sanitize_for_json(v) for k, v in obj.items()}
    elif isinstance(obj, (list, tuple)):
        return [sanitize_for_json(v) for v in obj]
    elif isinstance(obj, sp.Basic):
        return render(obj)
    elif isinstance(obj, (np.integer, np.floating, np.bool_)):
        return sanitize_for_json(obj.item())
    elif isinstance(obj, (np.ndarray, pd.Series)):
        return sanitize_for_json(obj.tolist())
    elif isinstance(obj, float):
        if np.isnan(obj) or np.isinf(obj):
            return None
        return obj
    else:
        return obj
