"""Reports, labels, tokenisation and the synthetic corpus generator."""

from .labels import (BINARY, FOUR_LEVEL, FULL, HARM_CODES, NO_HARM_CODES, SEVERITY_CODES, LabelSchema,
                     four_level_schema, get_schema, map_label)
from .reports import Report, checksum, dumps_jsonl, load_jsonl, save_jsonl
from .synthetic import PROFILES, GeneratorSpec, gen_synthetic, profile
from .text import (PAD_ID, UNK_ID, EncodedReport, Vocabulary, build_vocab, encode, encode_batch,
                   encode_tokens, tokenize)

__all__ = [
    "BINARY", "FOUR_LEVEL", "FULL", "HARM_CODES", "NO_HARM_CODES", "SEVERITY_CODES", "LabelSchema",
    "four_level_schema", "get_schema", "map_label", "Report", "checksum", "dumps_jsonl", "load_jsonl",
    "save_jsonl", "PROFILES", "GeneratorSpec", "gen_synthetic", "profile", "PAD_ID", "UNK_ID",
    "EncodedReport", "Vocabulary", "build_vocab", "encode", "encode_batch", "encode_tokens", "tokenize",
]
