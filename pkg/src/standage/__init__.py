"""
Forest stand age from airborne laser scanning metrics.

Modules: ``geodata`` (grids, point clouds, polygons), ``predictors`` (ALS,
spectral and terrain predictors), ``models`` (site-index specific age
models), ``fitting`` (OLS and stepwise selection), ``mapping`` (age maps and
stand estimates), ``evaluation`` (error statistics, synthetic scenes) and
``cli``.
"""

__version__ = "0.1.0"
