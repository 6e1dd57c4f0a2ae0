"""CSV / JSON-lines emission with a provenance digest line."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

DIGEST_PREFIX = "# config_digest: "


class DigestMismatchError(RuntimeError):
    pass


def _cell(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value)
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], digest: str, notes: Sequence[str] = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(f"{DIGEST_PREFIX}{digest}\n")
    for note in notes:
        buf.write(f"# {note}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    path.write_text(buf.getvalue())
    return path


def read_csv(path, expect_digest: str | None = None) -> tuple[str, list[dict]]:
    """Return ``(digest, rows)``; numeric cells are converted to float."""
    lines = Path(path).read_text().splitlines()
    digest = ""
    body = []
    for line in lines:
        if line.startswith(DIGEST_PREFIX):
            digest = line[len(DIGEST_PREFIX) :].strip()
        elif not line.startswith("#"):
            body.append(line)
    if expect_digest is not None and digest != expect_digest:
        raise DigestMismatchError(f"{path}: digest {digest!r} does not match expected {expect_digest!r}")
    rows = []
    for raw in csv.DictReader(body):
        row = {}
        for key, value in raw.items():
            try:
                row[key] = float(value)
            except ValueError:
                row[key] = value
        rows.append(row)
    return digest, rows


def write_jsonl(path, records: Iterable[dict], digest: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"config_digest": digest}, sort_keys=True)]
    lines += [json.dumps(r, sort_keys=True) for r in records]
    path.write_text("\n".join(lines) + "\n")
    return path


def restamp(src, dst, expect_digest: str, digest: str) -> Path:
    """Copy a CSV or JSON-lines artifact after checking its digest, re-stamped with ``digest``."""
    src, dst = Path(src), Path(dst)
    lines = src.read_text().splitlines(keepends=True)
    if not lines:
        raise DigestMismatchError(f"{src}: empty file")
    if lines[0].startswith(DIGEST_PREFIX):
        found = lines[0][len(DIGEST_PREFIX) :].strip()
        head = f"{DIGEST_PREFIX}{digest}\n"
    else:
        found = json.loads(lines[0]).get("config_digest", "")
        head = json.dumps({"config_digest": digest}, sort_keys=True) + "\n"
    if found != expect_digest:
        raise DigestMismatchError(f"{src}: digest {found!r} does not match expected {expect_digest!r}")
    dst.parent.mkdir(parents=True, exist_ok=True)
    dst.write_text(head + "".join(lines[1:]))
    return dst
