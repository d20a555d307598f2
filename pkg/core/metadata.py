from dataclasses import dataclass, asdict
import json, os


@dataclass
class RunInfo:
    command: str
    seed: int
    label: str = ""
    config_digest: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_dict(self) -> dict:
        return asdict(self)


def safe_label(label: str) -> str:
    return label.replace(os.sep, "_").replace("+", "_").replace(" ", "_")


def run_root(base_dir: str | os.PathLike, run: RunInfo) -> str:
    """``base_dir[/label]/seed_<n>``, created on demand; each run owns its subtree."""
    parts = [os.fspath(base_dir)]
    if run.label:
        parts.append(safe_label(run.label))
    parts.append(f"seed_{run.seed}")
    path = os.path.join(*parts)
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "run.json"), "w", encoding="utf-8") as f:
        f.write(run.to_json())
    return path
