"""Run configuration files, run directories, and artifact manifests."""

import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

from . import __version__
from .errors import ConfigError
from .formats import config_digest, file_digest
from .highway import HighwayConfig
from .training import RailConfig

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class BcSettings:
    epochs: int = 3000
    seed: int = 0
    learning_rate: float = 0.01

    @classmethod
    def from_dict(cls, data: dict) -> "BcSettings":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown bc config key(s): {sorted(unknown)}")
        out = cls(**data)
        if out.epochs < 0:
            raise ConfigError("bc.epochs must be >= 0")
        if out.learning_rate <= 0:
            raise ConfigError("bc.learning_rate must be > 0")
        return out


@dataclass(frozen=True)
class PolicySettings:
    kind: str = "two_layer"
    hidden: int = 10

    @classmethod
    def from_dict(cls, data: dict) -> "PolicySettings":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown policy config key(s): {sorted(unknown)}")
        out = cls(**data)
        if out.kind not in ("linear", "two_layer"):
            raise ConfigError("policy.kind must be 'linear' or 'two_layer'")
        if out.kind == "two_layer" and out.hidden < 1:
            raise ConfigError("policy.hidden must be >= 1")
        return out


@dataclass(frozen=True)
class RunConfig:
    """Parsed contents of a run configuration JSON document."""

    env: HighwayConfig
    rail: RailConfig
    bc: BcSettings
    policy: PolicySettings
    demos: Optional[str]
    output_dir: str
    experiment: str
    raw: dict = field(repr=False, default_factory=dict)

    def digest(self) -> str:
        return config_digest(self.raw)

    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.experiment


_TOP_KEYS = {"env", "rail", "bc", "policy", "demos", "output_dir", "experiment"}


def parse_run_config(data: dict, path: Optional[Path] = None,
                     require_demos: bool = False) -> RunConfig:
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    env = HighwayConfig.from_dict(data.get("env", {}))
    rail = RailConfig.from_dict(data.get("rail", {}))
    bc = BcSettings.from_dict(data.get("bc", {}))
    policy = PolicySettings.from_dict(data.get("policy", {}))
    demos = data.get("demos")
    if require_demos:
        if not demos:
            raise ConfigError("config is missing the 'demos' path")
        demos_path = Path(demos)
        if not demos_path.is_absolute() and path is not None:
            demos_path = path.parent / demos_path
        if not demos_path.exists():
            raise ConfigError(f"demos path does not exist: {demos_path}")
        demos = str(demos_path)
    # canonical raw copy with defaults materialized, used for the digest
    raw = {
        "env": env.to_dict(),
        "rail": {k: getattr(rail, k) for k in RailConfig.__dataclass_fields__},
        "bc": {k: getattr(bc, k) for k in BcSettings.__dataclass_fields__},
        "policy": {k: getattr(policy, k)
                   for k in PolicySettings.__dataclass_fields__},
        "demos": data.get("demos"),
        "experiment": data.get("experiment", "run"),
    }
    return RunConfig(
        env=env,
        rail=rail,
        bc=bc,
        policy=policy,
        demos=demos,
        output_dir=str(data.get("output_dir", "runs")),
        experiment=str(data.get("experiment", "run")),
        raw=raw,
    )


def load_run_config(path, require_demos: bool = False) -> RunConfig:
    """Load a run config; a bare environment JSON is also accepted."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    if not (_TOP_KEYS & set(data)):
        # bare HighwayConfig document
        data = {"env": data}
    return parse_run_config(data, path, require_demos=require_demos)


@dataclass
class RunManifest:
    experiment: str
    config_digest: str
    tool_version: str = __version__
    created: str = ""
    completed: str = ""
    artifacts: List[dict] = field(default_factory=list)

    def add(self, run_dir: Path, path: Path, kind: str):
        self.artifacts.append({
            "path": str(Path(path).relative_to(run_dir)),
            "sha256": file_digest(path),
            "kind": kind,
        })

    def write(self, run_dir: Path):
        self.completed = _now()
        payload = {
            "experiment": self.experiment,
            "config_digest": self.config_digest,
            "tool_version": self.tool_version,
            "created": self.created,
            "completed": self.completed,
            "artifacts": self.artifacts,
        }
        (run_dir / MANIFEST_NAME).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def new_manifest(experiment: str, digest: str) -> RunManifest:
    return RunManifest(experiment=experiment, config_digest=digest,
                       created=_now())


def make_run_dir(config: RunConfig) -> Path:
    run_dir = config.run_dir()
    os.makedirs(run_dir, exist_ok=True)
    return run_dir


def verify_run(run_dir) -> List[str]:
    """Check every manifest entry and embedded config digest; return problems."""
    from .formats import read_checkpoint, read_demos, CHECKPOINT_MAGIC, DEMO_MAGIC

    run_dir = Path(run_dir)
    problems = []
    manifest_path = run_dir / MANIFEST_NAME
    if not manifest_path.exists():
        return [f"missing {MANIFEST_NAME} in {run_dir}"]
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        return [f"manifest is not valid JSON: {exc}"]
    digest = manifest.get("config_digest", "")
    for entry in manifest.get("artifacts", []):
        path = run_dir / entry["path"]
        if not path.exists():
            problems.append(f"missing artifact: {entry['path']}")
            continue
        actual = file_digest(path)
        if actual != entry["sha256"]:
            problems.append(f"digest mismatch: {entry['path']}")
            continue
        with path.open("rb") as f:
            head = f.read(5)
        embedded = None
        if head == CHECKPOINT_MAGIC:
            embedded = (read_checkpoint(path).extra or {}).get("config_digest")
        elif head == DEMO_MAGIC:
            embedded = read_demos(path)[1].get("config_digest")
        if embedded is not None and embedded != digest:
            problems.append(
                f"config digest mismatch inside artifact: {entry['path']}")
    return problems
