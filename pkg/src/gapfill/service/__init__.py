"""HTTP service wrapping the imputation engine."""

from . import core, schemas

__all__ = ["core", "schemas"]
