import json
from pathlib import Path

from mrialign.synthdata import FORBIDDEN_TERMS

CORPUS = Path(__file__).parent / "fixtures" / "sanitizer_corpus.json"


def load_cases():
    """(text, forbidden terms, expected) triples; a null term list means the default terms."""
    cases = json.loads(CORPUS.read_text())
    return [(c["text"], FORBIDDEN_TERMS if c["forbidden"] is None else tuple(c["forbidden"]), c["expected"])
            for c in cases]
