"""Command-line entry point: config file parsing, experiment presets for the
group-size, CSI-error and delay-vs-population sweeps, and CSV emission.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import subprocess
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import yaml

from . import engine
from .engine import (EAB, GROUPED_RA, ChannelConfig, ClusteringConfig,
                     EngineConfig, GdbConfig, SimConfig)
from .protocol import ProtocolConfig
from .rach import EabConfig, RachConfig
from .scenario import ConfigurationError, ScenarioConfig

MODE_NAMES = {"grouped-ra": GROUPED_RA, "eab": EAB}
MODE_LABELS = {v: k for k, v in MODE_NAMES.items()}

_SECTIONS = {
    "scenario": ScenarioConfig,
    "channel": ChannelConfig,
    "clustering": ClusteringConfig,
    "rach": RachConfig,
    "eab": EabConfig,
    "protocol": ProtocolConfig,
    "gdb": GdbConfig,
    "engine": EngineConfig,
}


class ConfigError(ConfigurationError):
    """Config file rejected; message carries the key path and line."""


def _coerce(section: str, key: str, value, ftype, line) -> object:
    where = f"{section}.{key}"
    try:
        if key == "traffic_mix":
            mix = tuple(float(v) for v in value)
            if len(mix) != 3:
                raise ValueError("expected three fractions")
            return mix
        if key == "exempt_acs":
            return frozenset(int(v) for v in value)
        if ftype is bool or isinstance(value, bool):
            if not isinstance(value, bool):
                raise ValueError("expected a boolean")
            return value
        if ftype is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("expected an integer")
            return int(value)
        if ftype is float:
            return float(value)
        if ftype is str:
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}{_at(line)}") from exc
    return value


def _at(line) -> str:
    return f" (line {line})" if line is not None else ""


def _key_lines(text: str) -> dict[tuple[str, ...], int]:
    """Map (section, key) paths to 1-based source lines."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark else None
        raise ConfigError(f"config syntax error: {exc}{_at(line)}") from exc
    lines: dict[tuple[str, ...], int] = {}
    if root is None:
        return lines
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError("config root must be a mapping of sections")
    for sec_key, sec_val in root.value:
        lines[(sec_key.value,)] = sec_key.start_mark.line + 1
        if isinstance(sec_val, yaml.MappingNode):
            for key_node, _ in sec_val.value:
                lines[(sec_key.value, key_node.value)] = key_node.start_mark.line + 1
    return lines


def parse_config(text: str) -> SimConfig:
    """Parse a YAML config; missing keys default to the evaluation scenario.

    Unknown sections or keys are rejected with their key path and line;
    invariant violations surface the same way.
    """
    lines = _key_lines(text)
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping of sections")
    sections = {}
    for section, raw in data.items():
        cls = _SECTIONS.get(section)
        if cls is None:
            raise ConfigError(f"unknown section {section!r}{_at(lines.get((section,)))}")
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"section {section!r} must be a mapping"
                              f"{_at(lines.get((section,)))}")
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        ftypes = {f.name: type(getattr(cls(), f.name)) for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in fields:
                raise ConfigError(f"unknown key {section}.{key}"
                                  f"{_at(lines.get((section, key)))}")
            kwargs[key] = _coerce(section, key, value, ftypes[key], lines.get((section, key)))
        try:
            sections[section] = cls(**kwargs)
        except (ConfigurationError, ValueError) as exc:
            raise ConfigError(f"section {section!r}: {exc}"
                              f"{_at(lines.get((section,)))}") from exc
    config = SimConfig(**sections)
    try:
        config.validate()
    except (ConfigurationError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return config


def load_config(path: str | Path | None) -> SimConfig:
    if path is None:
        return SimConfig()
    return parse_config(Path(path).read_text())


def effective_config_text(config: SimConfig) -> str:
    """Normalized YAML of the full configuration; re-parsing reproduces it."""
    out = {}
    for section, cls in _SECTIONS.items():
        value = getattr(config, section)
        entry = {}
        for f in dataclasses.fields(cls):
            item = getattr(value, f.name)
            if isinstance(item, tuple):
                item = list(item)
            elif isinstance(item, frozenset):
                item = sorted(item)
            entry[f.name] = item
        out[section] = entry
    return yaml.safe_dump(out, sort_keys=True)


def build_identifier() -> str:
    """Git-describable build id, falling back to the package version."""
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, cwd=Path(__file__).parent, timeout=10)
        if described.returncode == 0 and described.stdout.strip():
            return described.stdout.strip()
    except OSError:
        pass
    from . import __version__
    return f"v{__version__}"


# --- presets --------------------------------------------------------------------


@dataclass(frozen=True)
class RunManifest:
    config_path: str | None = None
    mode: str = GROUPED_RA
    runs: int = 10
    seed: int = 1
    out_dir: str = "out"
    preset: str | None = None
    gnuplot: bool = False
    workers: int = 1


@dataclass(frozen=True)
class PresetPlan:
    name: str
    variable: str
    values: tuple
    modes: tuple[str, ...]
    runs: int
    config: SimConfig


def _fig3_config(base: SimConfig) -> SimConfig:
    return replace(
        base,
        scenario=replace(base.scenario, device_count=600, area_side=850.0),
        engine=replace(base.engine, horizon=0.25),
    )


def _fig4_config(base: SimConfig) -> SimConfig:
    return replace(
        base,
        scenario=replace(base.scenario, device_count=8000, area_side=800.0,
                         synchronized=True),
        clustering=replace(base.clustering, max_group_size=160),
        engine=replace(base.engine, horizon=0.25, grouping=engine.GROUPING_BS),
    )


def preset_plan(name: str, base: SimConfig, runs: int | None = None) -> PresetPlan:
    """The sweep a named preset performs; the preset fixes variable and values."""
    if name == "fig3":
        return PresetPlan("fig3", "group_size_cap", tuple(range(2, 51)),
                          (GROUPED_RA,), runs if runs is not None else 4,
                          _fig3_config(base))
    if name == "fig4":
        return PresetPlan("fig4", "csi_mae", tuple(float(v) for v in range(0, 13)),
                          (GROUPED_RA,), runs if runs is not None else 3,
                          _fig4_config(base))
    if name == "fig6":
        return PresetPlan("fig6", "device_count", (1000, 10000, 30000),
                          (GROUPED_RA, EAB), runs if runs is not None else 10, base)
    raise ConfigurationError(f"unknown preset {name!r}")


def _write_table(path: Path, header: list[str], rows: list[list], gnuplot: bool) -> Path:
    """CSV (or gnuplot .dat) with locale-independent decimal formatting."""
    formatted = [[_fmt(cell) for cell in row] for row in rows]
    if gnuplot:
        path = path.with_suffix(".dat")
        with open(path, "w", newline="") as fh:
            fh.write("# " + " ".join(header) + "\n")
            for row in formatted:
                fh.write(" ".join(row) + "\n")
        return path
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(formatted)
    return path


def _fmt(cell) -> str:
    if isinstance(cell, float):
        return repr(cell)
    return str(cell)


def run_preset(manifest: RunManifest) -> list[Path]:
    """Execute a preset sweep and emit its table(s); returns written paths."""
    base = load_config(manifest.config_path)
    plan = preset_plan(manifest.preset, base)
    if manifest.preset == "fig6":
        plan = dataclasses.replace(plan, runs=manifest.runs)
    out_dir = Path(manifest.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _probe_writable(out_dir)
    build = build_identifier()
    paths = []
    if plan.name == "fig3":
        rows = []
        for value, mc in engine.sweep(plan.config, plan.variable, list(plan.values),
                                      GROUPED_RA, plan.runs, manifest.seed,
                                      manifest.workers):
            agg = mc.aggregate()
            rows.append([value, agg["link_per_mean"][0], agg["link_reliability_mean"][0],
                         manifest.seed, build])
        paths.append(_write_table(out_dir / "fig3_group_size.csv",
                                  ["group_size", "mean_per", "mean_reliability",
                                   "seed", "build"],
                                  rows, manifest.gnuplot))
    elif plan.name == "fig4":
        rows = []
        for value, mc in engine.sweep(plan.config, plan.variable, list(plan.values),
                                      GROUPED_RA, plan.runs, manifest.seed,
                                      manifest.workers):
            agg = mc.aggregate()
            rows.append([value, agg["link_per_mean"][0], agg["link_per_worst"][0],
                         manifest.seed, build])
        paths.append(_write_table(out_dir / "fig4_csi_error.csv",
                                  ["mae_db", "mean_per", "worst_per", "seed", "build"],
                                  rows, manifest.gnuplot))
    elif plan.name == "fig6":
        rows = []
        for mode in plan.modes:
            for value, mc in engine.sweep(plan.config, plan.variable, list(plan.values),
                                          mode, plan.runs, manifest.seed,
                                          manifest.workers):
                agg = mc.aggregate()
                rows.append([value, MODE_LABELS[mode],
                             agg["mean_delay"][0], agg["mean_delay"][1],
                             agg["ull_mean_delay"][0], agg["censored_mean_delay"][0],
                             agg["collision_rate"][0], plan.runs, manifest.seed, build])
        paths.append(_write_table(out_dir / "fig6_delay_vs_devices.csv",
                                  ["device_count", "mode", "mean_delay_s",
                                   "delay_std_s", "ull_mean_delay_s",
                                   "censored_mean_delay_s", "collision_rate",
                                   "runs", "seed", "build"],
                                  rows, manifest.gnuplot))
    return paths


def _probe_writable(out_dir: Path) -> None:
    probe = out_dir / ".write-probe"
    try:
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigurationError(f"output directory not writable: {out_dir}: {exc}")


def run_plain(manifest: RunManifest) -> list[Path]:
    """Monte-Carlo batch at the config's scale; per-run and aggregate CSVs."""
    config = load_config(manifest.config_path)
    out_dir = Path(manifest.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _probe_writable(out_dir)
    build = build_identifier()
    mc = engine.monte_carlo(config, manifest.mode, manifest.runs, manifest.seed,
                            manifest.workers)
    scalar_keys = list(mc.runs[0].scalars().keys())
    run_rows = []
    for seed, report in zip(mc.seeds, mc.runs):
        scalars = report.scalars()
        run_rows.append([seed, MODE_LABELS[manifest.mode]]
                        + [scalars[k] for k in scalar_keys] + [build])
    paths = [_write_table(out_dir / "runs.csv",
                          ["seed", "mode"] + scalar_keys + ["build"],
                          run_rows, manifest.gnuplot)]
    agg = mc.aggregate()
    agg_rows = [[key, agg[key][0], agg[key][1], manifest.seed, build]
                for key in scalar_keys]
    paths.append(_write_table(out_dir / "aggregate.csv",
                              ["metric", "mean", "std", "base_seed", "build"],
                              agg_rows, manifest.gnuplot))
    return paths


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="grouped-ra",
        description="Grouped random-access vs EAB simulator for massive sensor cells")
    parser.add_argument("--config", help="YAML configuration file")
    parser.add_argument("--mode", choices=sorted(MODE_NAMES), default="grouped-ra")
    parser.add_argument("--runs", type=int, default=10)
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--preset", choices=["fig3", "fig4", "fig6"])
    parser.add_argument("--out", default="out")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--gnuplot", action="store_true",
                        help="emit gnuplot .dat instead of CSV")
    parser.add_argument("--emit-effective-config", action="store_true",
                        help="print the normalized configuration and exit")
    args = parser.parse_args(argv)

    try:
        if args.emit_effective_config:
            sys.stdout.write(effective_config_text(load_config(args.config)))
            return 0
        manifest = RunManifest(
            config_path=args.config, mode=MODE_NAMES[args.mode], runs=args.runs,
            seed=args.seed, out_dir=args.out, preset=args.preset,
            gnuplot=args.gnuplot, workers=args.workers)
        paths = run_preset(manifest) if args.preset else run_plain(manifest)
        for path in paths:
            print(path)
        return 0
    except (ConfigurationError, OSError) as exc:
        sys.stderr.write("ERROR " + json.dumps({"error": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
