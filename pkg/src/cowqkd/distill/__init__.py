"""Classical post-processing: error correction, privacy amplification, authentication."""
from .auth import AuthKeyPool, AuthPoolExhausted, authenticate, poly_hash, verify
from .block import DEFAULT_SAFETY_BITS, KeyBlock, compute_output_length
from .cascade import (CascadeResult, ParityOracle, ParityQuery, Shuffle, VerifyQuery,
                      cascade_correct, cascade_rounds, first_block_size)
from .toeplitz import ToeplitzSpec, ToeplitzSpecError, privacy_amplify

__all__ = [
    "AuthKeyPool", "AuthPoolExhausted", "authenticate", "poly_hash", "verify",
    "DEFAULT_SAFETY_BITS", "KeyBlock", "compute_output_length",
    "CascadeResult", "ParityOracle", "ParityQuery", "Shuffle", "VerifyQuery",
    "cascade_correct", "cascade_rounds", "first_block_size",
    "ToeplitzSpec", "ToeplitzSpecError", "privacy_amplify",
]
