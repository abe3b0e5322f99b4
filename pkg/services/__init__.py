# Package marker for service-level utilities.


