"""Run outputs: report.json / report.csv / sweep.json, log.jsonl, and directory digests."""
from __future__ import annotations
import csv, hashlib, json, os
from dataclasses import asdict, is_dataclass


def _plain(obj):
    if is_dataclass(obj):
        return asdict(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_json(path: str | os.PathLike, payload) -> str:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_plain)
        f.write("\n")
    return os.fspath(path)


def write_report_json(path: str | os.PathLike, payload: dict) -> str:
    return write_json(path, payload)


def write_sweep_json(path: str | os.PathLike, records: list) -> str:
    return write_json(path, {"records": [_plain(r) if is_dataclass(r) else r for r in records]})


def append_jsonl(path: str | os.PathLike, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True, separators=(",", ":")))
        f.write("\n")


def read_jsonl(path: str | os.PathLike) -> list[dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def table_rows(columns: dict[str, dict], class_names: list[str] | None = None) -> list[list[str]]:
    """Per-class F1 rows then MA/mIoU/mF1 (Avg) and (Std) rows, one column per report."""
    names = list(columns)
    n_classes = max((len(r["per_class_f1"]) for r in columns.values()), default=0)
    class_names = class_names or [f"class {c}" for c in range(n_classes)]
    rows = [["row"] + names]
    for c in range(n_classes):
        rows.append([class_names[c]] + [f"{columns[n]['per_class_f1'][c]:.4f}" for n in names])
    for key, label in (("ma", "MA"), ("miou", "mIoU"), ("mf1", "mF1")):
        rows.append([f"{label} (Avg)"] + [f"{columns[n][key]:.4f}" for n in names])
        rows.append([f"{label} (Std)"] + [f"{columns[n][key + '_std']:.4f}" for n in names])
    return rows


def write_report_csv(path: str | os.PathLike, columns: dict[str, dict]) -> str:
    with open(path, "w", encoding="utf-8", newline="") as f:
        csv.writer(f).writerows(table_rows(columns))
    return os.fspath(path)


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def directory_digest(directory: str | os.PathLike, exclude: tuple[str, ...] = ()) -> str:
    """SHA-256 over sorted relative paths and file contents under ``directory``."""
    h = hashlib.sha256()
    for root, dirs, files in os.walk(directory):
        dirs.sort()
        for f in sorted(files):
            if f in exclude:
                continue
            full = os.path.join(root, f)
            rel = os.path.relpath(full, directory).replace(os.sep, "/")
            h.update(rel.encode("utf-8"))
            h.update(b"\0")
            h.update(file_digest(full).encode("ascii"))
    return h.hexdigest()
