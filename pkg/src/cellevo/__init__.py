"""Multi-objective evolutionary search over recurrent cell architectures."""

from .encoding import (
    Architecture,
    Block,
    block_count,
    deserialize,
    encode_basic_rnn,
    encode_gru,
    encode_lstm,
    serialize,
    to_dot,
    validate,
)
from .search import SearchConfig, run_search

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "Block",
    "SearchConfig",
    "block_count",
    "deserialize",
    "encode_basic_rnn",
    "encode_gru",
    "encode_lstm",
    "run_search",
    "serialize",
    "to_dot",
    "validate",
]
