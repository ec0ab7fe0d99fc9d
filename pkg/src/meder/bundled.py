"""Paths to data files shipped inside the package."""

from pathlib import Path

DATA_DIR = Path(__file__).resolve().parent / "data"

STOPWORDS_FILE = "stopwords_bn.txt"
SUFFIXES_FILE = "suffixes_bn.tsv"
SAMPLE_CORPUS_FILE = "sample_corpus.jsonl"
SAMPLE_LABELS_FILE = "sample_labels.txt"


def data_path(name: str) -> Path:
    p = DATA_DIR / name
    if not p.exists():
        raise FileNotFoundError(f"bundled data file {name!r} not found at {p}")
    return p
