"""Answering oracles: a synthetic implementation and an HTTP client."""

from .base import Oracle, OracleError, OracleReply, OracleRequest, RequestKind
from .synthetic import SyntheticOracle

__all__ = ["Oracle", "OracleError", "OracleReply", "OracleRequest", "RequestKind", "SyntheticOracle"]
