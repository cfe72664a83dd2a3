"""
Run manifest: dataset file layout, period boundaries and per-run options.

A manifest is a JSON file. Relative paths are resolved against the
manifest's directory. Sections ``model``, ``pretrain``, ``finetune``,
``curation``, ``extremes`` and ``options`` are optional overrides of the
corresponding config defaults; a separate TOML or JSON run config can
override them again.
"""

import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from floodcast.errors import ValidationError
from floodcast.hydrodata import Period

logger = logging.getLogger(__name__)

PERIOD_NAMES = ("pretrain", "finetune", "validation", "test")

DEFAULT_PERIODS = {
    "pretrain": ("1980-01-01", "2019-12-31"),
    "finetune": ("2016-01-01", "2019-12-31"),
    "validation": ("2020-01-01", "2020-12-31"),
    "test": ("2021-01-01", "2024-12-31"),
}

DEFAULT_OPTIONS = {
    "reuse_basin_sigma": True,
    "hindcast_source": "forecast",
    "paired_wet_days": False,
    "aggregate_lead_times": True,
    "n_validation_basins": 1000,
    "threads": 1,
    "dtype": "float32",
}


@dataclass(frozen=True)
class StationEntry:
    station_id: str
    area_km2: float
    discharge: Path
    reanalysis: Optional[Path] = None
    forecast: Optional[Path] = None
    utc_offset_hours: float = 0.0


@dataclass(frozen=True)
class RunManifest:
    """
    Parameters
    ----------
    root: Path
        Directory against which relative paths were resolved.
    stations: tuple of StationEntry
        Stations and their files.
    periods: dict
        ``pretrain``, ``finetune``, ``validation`` and ``test`` Periods.
    discharge_units: str
        ``"m3/s"`` (converted on load) or ``"mm/d"``.
    attributes: Path or None
        Static attribute CSV keyed by ``station_id``.
    geometries: Path or None
        GeoJSON FeatureCollection of basin polygons.
    seed: int
        Run seed.
    sections: dict
        Raw override sections (``model``, ``pretrain``, ``finetune``,
        ``curation``, ``extremes``).
    options: dict
        Run options, see ``DEFAULT_OPTIONS``.
    """

    root: Path
    stations: Tuple[StationEntry, ...]
    periods: Mapping[str, Period]
    discharge_units: str = "mm/d"
    attributes: Optional[Path] = None
    geometries: Optional[Path] = None
    seed: int = 0
    sections: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    options: Mapping[str, Any] = field(default_factory=lambda: dict(DEFAULT_OPTIONS))
    source: Optional[Path] = None

    def __post_init__(self):
        if self.discharge_units not in ("m3/s", "mm/d"):
            raise ValidationError(f"'discharge_units' must be 'm3/s' or 'mm/d', got '{self.discharge_units}'.")
        ids = [s.station_id for s in self.stations]
        if len(ids) != len(set(ids)):
            raise ValidationError("Manifest lists a station twice.")
        self.validate_periods()

    def validate_periods(self):
        p = self.periods
        missing = [name for name in PERIOD_NAMES if name not in p]
        if missing:
            raise ValidationError(f"Manifest is missing periods: {missing}.")
        if p["finetune"].start < p["pretrain"].start:
            raise ValidationError("'finetune' period must not start before 'pretrain'.")
        if p["validation"].start <= max(p["pretrain"].end, p["finetune"].end):
            raise ValidationError("'validation' period must follow the training periods.")
        if p["test"].start <= p["validation"].end:
            raise ValidationError("'test' period must follow the validation period.")
        for name in ("pretrain", "finetune", "validation"):
            if p["test"].overlaps(p[name]):
                raise ValidationError(f"'test' period overlaps '{name}'.")

    @property
    def station_ids(self) -> List[str]:
        return sorted(s.station_id for s in self.stations)

    def station(self, station_id: str) -> StationEntry:
        for entry in self.stations:
            if entry.station_id == station_id:
                return entry
        raise ValidationError(f"Unknown station '{station_id}'.")

    def section(self, name: str) -> Dict[str, Any]:
        return dict(self.sections.get(name, {}))

    def option(self, name: str):
        return self.options.get(name, DEFAULT_OPTIONS.get(name))

    def with_overrides(self, seed: Optional[int] = None, threads: Optional[int] = None, run_config: Optional[Mapping] = None) -> "RunManifest":
        """Apply CLI flags and a run config on top of the manifest"""
        sections = {k: dict(v) for k, v in self.sections.items()}
        options = dict(self.options)
        if run_config:
            for key, value in run_config.items():
                if key == "options":
                    options.update(value)
                elif key == "seed":
                    seed = value if seed is None else seed
                elif isinstance(value, Mapping):
                    sections.setdefault(key, {}).update(value)
                else:
                    raise ValidationError(f"Run config key '{key}' must be a table.")
        if threads is not None:
            options["threads"] = threads
        return replace(
            self,
            seed=self.seed if seed is None else int(seed),
            sections=sections,
            options=options,
        )

    def to_dict(self) -> dict:
        def rel(path):
            if path is None:
                return None
            try:
                return str(Path(path).relative_to(self.root))
            except ValueError:
                return str(path)

        return {
            "discharge_units": self.discharge_units,
            "attributes": rel(self.attributes),
            "geometries": rel(self.geometries),
            "seed": self.seed,
            "periods": {name: period.to_list() for name, period in self.periods.items()},
            "stations": [
                {
                    "station_id": s.station_id,
                    "area_km2": s.area_km2,
                    "utc_offset_hours": s.utc_offset_hours,
                    "discharge": rel(s.discharge),
                    "reanalysis": rel(s.reanalysis),
                    "forecast": rel(s.forecast),
                }
                for s in self.stations
            ],
            **{name: dict(values) for name, values in self.sections.items()},
            "options": dict(self.options),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def from_dict(cls, raw: Mapping, root=".") -> "RunManifest":
        root = Path(root)

        def resolve(value):
            if value is None:
                return None
            path = Path(value)
            return path if path.is_absolute() else root / path

        if "stations" not in raw:
            raise ValidationError("Manifest has no 'stations' list.")
        stations = []
        for entry in raw["stations"]:
            try:
                stations.append(
                    StationEntry(
                        station_id=str(entry["station_id"]),
                        area_km2=float(entry["area_km2"]),
                        discharge=resolve(entry["discharge"]),
                        reanalysis=resolve(entry.get("reanalysis")),
                        forecast=resolve(entry.get("forecast")),
                        utc_offset_hours=float(entry.get("utc_offset_hours", 0.0)),
                    )
                )
            except KeyError as exc:
                raise ValidationError(f"Station entry is missing {exc}.") from exc

        periods = {name: Period.parse(value) for name, value in DEFAULT_PERIODS.items()}
        periods.update({name: Period.parse(value) for name, value in raw.get("periods", {}).items()})
        options = dict(DEFAULT_OPTIONS)
        options.update(raw.get("options", {}))
        sections = {
            name: dict(raw[name])
            for name in ("model", "pretrain", "finetune", "curation", "extremes")
            if name in raw
        }
        return cls(
            root=root,
            stations=tuple(stations),
            periods=periods,
            discharge_units=raw.get("discharge_units", "mm/d"),
            attributes=resolve(raw.get("attributes")),
            geometries=resolve(raw.get("geometries")),
            seed=int(raw.get("seed", 0)),
            sections=sections,
            options=options,
        )

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"Cannot read manifest '{path}': {exc}") from exc
        return replace(cls.from_dict(raw, root=path.parent), source=path)


def load_run_config(path) -> dict:
    """Read a TOML or JSON run config"""
    path = Path(path)
    try:
        if path.suffix == ".toml":
            with open(path, "rb") as f:
                return tomllib.load(f)
        return json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ValidationError(f"Cannot read run config '{path}': {exc}") from exc
