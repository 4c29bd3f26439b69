"""Run configuration: YAML schema, validation with line numbers, physics hash.

Units in config files: nm, us, gauss; strains in MHz (linear), converted to
rad/us on load.  See ``configs/*.yaml`` for annotated examples.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .nv import FieldConfig, SensorConfig, TargetSpin
from .positioning import LibraryGrid, physics_hash
from .sequences import make_sequence
from .spin import to_angular

# schema: key -> python type(s), nested dict, or [dict] for a list of mappings
NUM = (int, float)
SCHEMA = {
    "name": str,
    "seed": int,
    "engine": str,
    "quadratic_term": bool,
    "include_bystanders": bool,
    "field": {"magnitude_gauss": NUM, "direction": (list, type(None))},
    "sequence": {"family": str, "n_pulses": int, "t_start_us": NUM, "t_stop_us": NUM, "n_samples": int},
    "sensors": [{"id": str, "position_nm": list, "axis": list, "strain_mhz": NUM}],
    "layout": {"target_nm": list, "polar": list, "azimuth_deg": list, "target_offset_nm": list},
    "target": {"position_nm": list},
    "library": {
        "r_min_nm": NUM,
        "r_max_nm": NUM,
        "dr_nm": NUM,
        "theta_min_deg": NUM,
        "theta_max_deg": NUM,
        "dtheta_deg": NUM,
        "engine": str,
    },
    "match": {"tol_t": NUM, "tol_depth": NUM, "threshold": NUM, "voxel_nm": NUM, "remove_bystanders": bool},
    "bath": {
        "abundance": NUM,
        "cutoff_nm": NUM,
        "sensor": str,
        "n_realizations": int,
        "t_stop_us": NUM,
        "n_samples": int,
    },
}
REQUIRED = ("field", "sequence", "sensors")


class ConfigError(ValueError):
    """Invalid configuration; message carries ``file:line``."""


def _where(path, node) -> str:
    return f"{path}:{node.start_mark.line + 1}"


def _check(node, schema, path, ctx):
    if isinstance(schema, dict):
        if not isinstance(node, yaml.MappingNode):
            raise ConfigError(f"{_where(path, node)}: '{ctx}' must be a mapping")
        for k, v in node.value:
            if k.value not in schema:
                allowed = ", ".join(sorted(schema))
                raise ConfigError(f"{_where(path, k)}: unknown key '{k.value}' in '{ctx or 'top level'}' (allowed: {allowed})")
            _check(v, schema[k.value], path, f"{ctx}.{k.value}" if ctx else k.value)
        return
    if isinstance(schema, list):
        if not isinstance(node, yaml.SequenceNode):
            raise ConfigError(f"{_where(path, node)}: '{ctx}' must be a list")
        for i, item in enumerate(node.value):
            _check(item, schema[0], path, f"{ctx}[{i}]")
        return
    value = yaml.safe_load(yaml.serialize(node))
    types = schema if isinstance(schema, tuple) else (schema,)
    if isinstance(value, bool) and bool not in types:
        ok = False
    else:
        ok = isinstance(value, types)
    if not ok:
        names = "/".join(t.__name__ for t in types)
        raise ConfigError(f"{_where(path, node)}: '{ctx}' must be {names}, got {value!r}")


@dataclass
class SequenceSpec:
    family: str = "CPMG"
    n_pulses: int = 30
    t_start_us: float = 1.0
    t_stop_us: float = 100.0
    n_samples: int = 2001

    def times(self) -> np.ndarray:
        return np.linspace(self.t_start_us, self.t_stop_us, self.n_samples)

    @property
    def effective_pulses(self) -> int:
        """Number of pi pulses actually applied (XY8-k has 8k)."""
        return make_sequence(self.family, self.n_pulses, 1.0).n_pulses


@dataclass
class MatchSpec:
    tol_t: float = 0.001
    tol_depth: float = 0.02
    threshold: float = 0.99
    voxel_nm: float = 0.05
    remove_bystanders: bool = True


@dataclass
class BathSpec:
    abundance: float = 0.011
    cutoff_nm: float = 8.0
    sensor: str | None = None
    n_realizations: int = 5
    t_stop_us: float = 1000.0
    n_samples: int = 101

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_stop_us, self.n_samples)


@dataclass
class RunConfig:
    sensors: list[SensorConfig]
    field: FieldConfig
    sequence: SequenceSpec
    target: TargetSpin | None = None
    engine: str = "exact"
    quadratic_term: bool = False
    include_bystanders: bool = True
    grid: LibraryGrid | None = None
    library_engine: str = "exact"
    match: MatchSpec = field(default_factory=MatchSpec)
    bath: BathSpec | None = None
    seed: int = 0
    name: str = "run"
    source: str = ""

    def sensor(self, sid: str) -> SensorConfig:
        for s in self.sensors:
            if s.id == sid:
                return s
        raise ConfigError(f"{self.source}: unknown sensor id '{sid}'")

    def physics(self) -> dict:
        """Parameters that determine simulated physics (no paths, threads or names)."""
        return {
            "sensors": [
                {"id": s.id, "position": list(s.position), "axis": list(s.axis), "strain": s.strain, "gamma": s.gamma, "zfs": s.zfs}
                for s in self.sensors
            ],
            "field": {"magnitude": self.field.magnitude, "direction": self.field.direction},
            "sequence": dataclasses.asdict(self.sequence),
            "target": None if self.target is None else list(self.target.position),
            "engine": self.engine,
            "quadratic_term": self.quadratic_term,
            "include_bystanders": self.include_bystanders,
            "grid": None if self.grid is None else dataclasses.asdict(self.grid),
            "library_engine": self.library_engine,
            "match": dataclasses.asdict(self.match),
            "bath": None if self.bath is None else dataclasses.asdict(self.bath),
            "seed": self.seed,
        }

    @property
    def hash(self) -> str:
        return physics_hash(self.physics())


def _vec(v, where, n=3):
    a = np.asarray(v, dtype=float)
    if a.shape != (n,):
        raise ConfigError(f"{where}: expected a list of {n} numbers")
    return tuple(float(x) for x in a)


def _layout_positions(doc: dict, path) -> list[tuple]:
    lay = doc["layout"]
    target = np.array(_vec(lay.get("target_nm", [0, 0, 0]), f"{path}: layout.target_nm"))
    polar = lay.get("polar")
    az = lay.get("azimuth_deg")
    n = len(doc["sensors"])
    if polar is None or az is None or len(polar) != n or len(az) != n:
        raise ConfigError(f"{path}: layout needs 'polar' and 'azimuth_deg' with one entry per sensor")
    out = []
    for s, (r, th), ph in zip(doc["sensors"], polar, az):
        fr = SensorConfig("tmp", axis=tuple(s.get("axis", (1, 1, 1)))).frame()
        th, ph = np.radians(th), np.radians(ph)
        local = r * np.array([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])
        out.append(tuple(float(x) for x in target - fr.T @ local))
    return out


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark else ""
        raise ConfigError(f"{source}{line}: YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    if root is None:
        raise ConfigError(f"{source}:1: empty configuration")
    _check(root, SCHEMA, source, "")
    doc = yaml.safe_load(text)
    for key in REQUIRED:
        if key not in doc:
            raise ConfigError(f"{source}: missing required section '{key}'")
    if "layout" in doc and "target" in doc:
        raise ConfigError(f"{source}: give either 'layout' (which fixes the target) or 'target', not both")

    positions = _layout_positions(doc, source) if "layout" in doc else None
    sensors = []
    ids = set()
    for i, s in enumerate(doc["sensors"]):
        if "id" not in s:
            raise ConfigError(f"{source}: sensors[{i}] needs an 'id'")
        if s["id"] in ids:
            raise ConfigError(f"{source}: duplicate sensor id '{s['id']}'")
        ids.add(s["id"])
        if positions is not None:
            if "position_nm" in s:
                raise ConfigError(f"{source}: sensors[{i}].position_nm conflicts with 'layout'")
            pos = positions[i]
        else:
            pos = _vec(s.get("position_nm", [0, 0, 0]), f"{source}: sensors[{i}].position_nm")
        strain = float(s.get("strain_mhz", 0.0))
        if strain < 0:
            raise ConfigError(f"{source}: sensors[{i}].strain_mhz must be >= 0")
        axis = _vec(s.get("axis", [1, 1, 1]), f"{source}: sensors[{i}].axis")
        sensors.append(SensorConfig(s["id"], pos, axis=axis, strain=to_angular(strain)))

    f = doc["field"]
    if float(f.get("magnitude_gauss", -1)) < 0:
        raise ConfigError(f"{source}: field.magnitude_gauss must be given and >= 0")
    direction = f.get("direction")
    field_cfg = FieldConfig(float(f["magnitude_gauss"]), None if direction is None else _vec(direction, f"{source}: field.direction"))

    seq = SequenceSpec(**doc["sequence"])
    if seq.family.upper() not in ("CPMG", "XY8"):
        raise ConfigError(f"{source}: sequence.family must be CPMG or XY8")
    if seq.n_pulses < 1 or seq.n_samples < 3 or not 0 <= seq.t_start_us < seq.t_stop_us:
        raise ConfigError(f"{source}: sequence needs n_pulses >= 1, n_samples >= 3 and 0 <= t_start_us < t_stop_us")

    target = None
    if "layout" in doc:
        lay = doc["layout"]
        base = np.array(_vec(lay.get("target_nm", [0, 0, 0]), f"{source}: layout.target_nm"))
        offset = np.array(_vec(lay.get("target_offset_nm", [0, 0, 0]), f"{source}: layout.target_offset_nm"))
        target = TargetSpin(tuple(base + offset))
    elif "target" in doc:
        target = TargetSpin(_vec(doc["target"].get("position_nm"), f"{source}: target.position_nm"))

    engine = doc.get("engine", "exact")
    if engine not in ("exact", "magnus", "semiclassical"):
        raise ConfigError(f"{source}: engine must be exact, magnus or semiclassical")

    grid = None
    lib_engine = "exact"
    if "library" in doc:
        lib = dict(doc["library"])
        lib_engine = lib.pop("engine", "exact")
        if lib_engine not in ("exact", "magnus"):
            raise ConfigError(f"{source}: library.engine must be exact or magnus")
        keys = {"r_min_nm": "r_min", "r_max_nm": "r_max", "dr_nm": "dr"}
        try:
            grid = LibraryGrid(**{keys.get(k, k): v for k, v in lib.items()}, n_pulses=seq.effective_pulses)
        except ValueError as exc:
            raise ConfigError(f"{source}: library: {exc}") from None

    match = MatchSpec(**doc.get("match", {}))
    if match.tol_t < 0 or match.tol_depth < 0 or match.voxel_nm <= 0:
        raise ConfigError(f"{source}: match tolerances must be >= 0 and voxel_nm > 0")

    bath = None
    if "bath" in doc:
        bath = BathSpec(**doc["bath"])
        if not 0 <= bath.abundance <= 1 or bath.cutoff_nm <= 0 or bath.n_realizations < 1:
            raise ConfigError(f"{source}: bath needs abundance in [0, 1], cutoff_nm > 0, n_realizations >= 1")
        if bath.sensor is not None and bath.sensor not in ids:
            raise ConfigError(f"{source}: bath.sensor '{bath.sensor}' is not a configured sensor")

    return RunConfig(
        sensors=sensors,
        field=field_cfg,
        sequence=seq,
        target=target,
        engine=engine,
        quadratic_term=bool(doc.get("quadratic_term", False)),
        include_bystanders=bool(doc.get("include_bystanders", True)),
        grid=grid,
        library_engine=lib_engine,
        match=match,
        bath=bath,
        seed=int(doc.get("seed", 0)),
        name=str(doc.get("name", Path(source).stem)),
        source=source,
    )


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    return parse_config(text, str(p))
