"""Reference token ids for the tokenizer fixture, produced with the HuggingFace
`tokenizers` byte-level BPE loaded from data/vocab.json and data/merges.txt."""
import json
import pathlib

from tokenizers import Tokenizer, pre_tokenizers
from tokenizers.models import BPE

DATA = pathlib.Path(__file__).resolve().parent.parent / "data"
tok = Tokenizer(BPE.from_file(str(DATA / "vocab.json"), str(DATA / "merges.txt")))
tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)

STRINGS = [
    "When Mary and John went to the store, John gave a drink to",
    " Mary",
    "",
    "Hello world",
    "Then, Alice and Bob had a long argument. Afterwards Bob said to",
    "I'm sure you've seen what they'll do, won't they?",
    "   leading and trailing spaces   ",
    "tabs\tand\nnewlines\n\n",
    "Numbers: 3.14159, 2718 and 1,000,000.",
    "naïve café résumé über",
    "日本語のテキスト",
    "emoji 🚀✨ test",
    "symbols #$%&*()[]{}<>~`^",
    "camelCaseIdentifiersAndSnake_case_words",
    "https://example.com/path?query=value&x=1",
    "The quick brown fox jumps over the lazy dog.",
    "He said \"hello\" and she said 'goodbye'.",
    "    indented code block\n        more indent",
    "Ωmega σ ∑ √ ≤ ≥",
    "'s 't 're 've 'm 'll 'd",
]
out = [{"text": s, "ids": tok.encode(s).ids} for s in STRINGS]
(DATA / "fixtures" / "tokenizer_ids.json").write_text(json.dumps(out, indent=1, ensure_ascii=False) + "\n")
print(len(out), "strings")
