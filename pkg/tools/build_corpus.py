"""Assemble data/shakespeare.txt from the Gutenberg texts bundled in the
``shakespeare==0.6`` sdist on PyPI.

Only the modern-spelling plays and poems (``*_gut.txt``, not the First Folio
``*_gut_f.txt`` variants) are used. Text is reduced to the 65-character
alphabet of the common tiny-shakespeare file so that the vocabulary stays
comparable with other character-level runs.

    python tools/build_corpus.py                      # downloads the sdist with pip
    python tools/build_corpus.py --sdist shakespeare-0.6.tar.gz
"""
import argparse
import re
import string
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

ALPHABET = set(string.ascii_letters + "\n !$&',-.3:;?")
TRANSLATE = {'"': "'", "\t": " "}


def fetch_sdist(dest: Path) -> Path:
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "--no-binary", ":all:",
         "shakespeare==0.6", "-d", str(dest)],
        check=True,
    )
    return next(dest.glob("shakespeare-0.6*.tar.gz"))


def normalize(text: str) -> str:
    out = []
    for ch in text.replace("\r", ""):
        ch = TRANSLATE.get(ch, ch)
        if ch in ALPHABET:
            out.append(ch)
    text = "".join(out)
    text = "\n".join(line.rstrip() for line in text.split("\n"))
    text = re.sub(r"\n{3,}", "\n\n", text)
    return text.strip("\n") + "\n"


def build(sdist: Path) -> str:
    parts = []
    with tarfile.open(sdist) as tar:
        members = sorted(
            (m for m in tar.getmembers()
             if "/shksprdata/texts/" in m.name and m.name.endswith("_gut.txt")),
            key=lambda m: m.name,
        )
        for m in members:
            raw = tar.extractfile(m).read().decode("latin-1")
            parts.append(normalize(raw))
    return "\n".join(parts)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sdist", type=Path, help="path to shakespeare-0.6.tar.gz")
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "data" / "shakespeare.txt")
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        sdist = args.sdist or fetch_sdist(Path(tmp))
        corpus = build(sdist)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(corpus, encoding="utf-8")
    print(f"wrote {args.out}: {len(corpus)} chars, {len(set(corpus))} distinct")


if __name__ == "__main__":
    main()
