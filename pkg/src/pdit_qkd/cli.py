"""Batch front-end: scenario files, Monte-Carlo trials, gap scans.

Exit codes: 0 success, 2 configuration error, 3 runtime failure (``verify``
returns 1 when a check fails).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .channels import (
    HONEST,
    IID_ATTACK,
    JOINT_ATTACK,
    MODES,
    SourceSpec,
    basic_copies_attack,
    copy_labels,
    depolarize_key,
    flip_channels,
)
from .metrics import GapRecord, ed_bound_example, log_negativity
from .pdit import (
    PditSpec,
    assemble_pdit,
    example_pbit,
    random_pdit_spec,
)
from .protocol import ProtocolConfig, ProtocolOutcome, run
from .qcore import DensityMatrix, SystemLayout, UnitaryOp

log = logging.getLogger("pdit_qkd")

GAP_HEADER = ("d", "key_rate", "ln_per_copy", "ed_bound", "aborted_fraction")
MAX_GAP_D = 16
OUTPUT_KINDS = ("outcome_json", "transcript_ndjson", "gap_csv")


class ConfigError(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    protocol: dict
    source: SourceSpec
    trials: int = 1
    outputs: dict = field(default_factory=dict)
    gap_d: tuple[int, ...] = (2, 4, 8, 16)
    base_dir: Path = Path(".")

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        paths = [v for v in self.outputs.values() if v]
        if len(set(paths)) != len(paths):
            raise ConfigError("output paths must be distinct")

    def protocol_config(self, seed: int | None = None) -> ProtocolConfig:
        overrides = dict(self.protocol)
        if seed is not None:
            overrides["seed"] = seed
        return build_protocol_config(overrides, self.source.target)


# ---------------------------------------------------------------------------
# config parsing

_PROTOCOL_FIELDS = {f.name for f in fields(ProtocolConfig)}


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise ConfigError(f"missing required field '{where}{key}'")
    return table[key]


def build_protocol_config(table: dict, spec: PditSpec) -> ProtocolConfig:
    """``n`` is required; any of ``k``, ``m``, ``t`` left out follow the default
    logarithmic sampling policy."""
    unknown = set(table) - _PROTOCOL_FIELDS - {"c0"}
    if unknown:
        raise ConfigError(f"unknown protocol fields: {sorted(unknown)}")
    n = _require(table, "n", "protocol.")
    overrides = {k: v for k, v in table.items() if k not in ("n", "c0")}
    if "teleport_noise" in overrides:
        overrides["teleport_noise"] = tuple(overrides["teleport_noise"])
    try:
        return ProtocolConfig.default(int(n), spec, c0=table.get("c0", 8), **overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid protocol configuration: {exc}") from exc


def build_target(table: dict) -> PditSpec:
    kind = table.get("kind", "example_pbit")
    if kind == "example_pbit":
        return example_pbit(int(_require(table, "d", "source.target.")))
    if kind == "random":
        rng = np.random.default_rng(int(table.get("seed", 0)))
        return random_pdit_spec(rng, int(table.get("key_d", 2)), int(table.get("shield_a", 2)),
                                int(table.get("shield_b", 2)))
    if kind == "basic":
        key_d, sa, sb = int(table.get("key_d", 2)), int(table.get("shield_a", 2)), int(table.get("shield_b", 2))
        layout = SystemLayout(("A'", "B'"), (sa, sb))
        eye = UnitaryOp.identity(layout)
        return PditSpec(key_d, sa, sb, (eye,) * key_d, DensityMatrix.maximally_mixed(layout))
    raise ConfigError(f"unknown target kind {kind!r}")


def build_channel(table: dict):
    kind = _require(table, "kind", "source.channel.")
    if kind == "depolarize_key":
        return depolarize_key(float(_require(table, "q", "source.channel.")))
    if kind == "flip":
        return flip_channels(float(table.get("p_bit", 0.0)), float(table.get("p_phase", 0.0)),
                             table.get("target", "B"))
    raise ConfigError(f"unknown channel kind {kind!r}")


def build_joint_state(table: dict, target: PditSpec, base: Path) -> DensityMatrix:
    kind = _require(table, "kind", "source.joint_state.")
    if kind == "basic_copies":
        return basic_copies_attack(target, int(table.get("copies", 2)))
    if kind == "npy":
        path = base / _require(table, "path", "source.joint_state.")
        entries = np.load(path)
        copies = int(_require(table, "copies", "source.joint_state."))
        labels = [x for i in range(copies) for x in copy_labels(i)]
        layout = SystemLayout(tuple(labels), target.layout.dims * copies)
        return DensityMatrix.from_array(entries, layout, clip=True)
    raise ConfigError(f"unknown joint_state kind {kind!r}")


def build_source(table: dict, base: Path) -> SourceSpec:
    mode = _require(table, "mode", "source.")
    if mode not in MODES:
        raise ConfigError(f"source.mode must be one of {MODES}, got {mode!r}")
    target = build_target(table.get("target", {}))
    channel = build_channel(_require(table, "channel", "source.")) if mode == IID_ATTACK else None
    joint = None
    if mode == JOINT_ATTACK:
        joint = build_joint_state(_require(table, "joint_state", "source."), target, base)
    try:
        return SourceSpec(mode, target, channel, joint, float(table.get("ebit_fidelity", 1.0)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    protocol = dict(_require(data, "protocol", ""))
    _require(protocol, "n", "protocol.")
    try:
        source = build_source(_require(data, "source", ""), path.parent)
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid source: {exc}") from exc
    outputs = dict(data.get("outputs", {}))
    unknown = set(outputs) - set(OUTPUT_KINDS)
    if unknown:
        raise ConfigError(f"unknown outputs: {sorted(unknown)}")
    gap = data.get("gap", {})
    scenario = Scenario(
        name=str(data.get("name", path.stem)),
        protocol=protocol,
        source=source,
        trials=int(data.get("trials", 1)),
        outputs=outputs,
        gap_d=tuple(int(x) for x in gap.get("d", (2, 4, 8, 16))),
        base_dir=path.parent,
    )
    scenario.protocol_config()  # validate eagerly
    return scenario


# ---------------------------------------------------------------------------
# running


def trial_seed(master: int, trial: int) -> int:
    """Seed for trial ``trial``, split from ``master`` by index."""
    ss = np.random.SeedSequence(master, spawn_key=(trial,))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _one_trial(args):
    config, source, want_transcript = args
    transcript = [] if want_transcript else None
    outcome = run(config, source, transcript=transcript)
    return outcome, transcript


def run_trials(scenario: Scenario, master_seed: int, trials: int, want_transcript: bool,
               jobs: int = 1) -> list[tuple[ProtocolOutcome, list | None]]:
    tasks = [(scenario.protocol_config(trial_seed(master_seed, i)), scenario.source, want_transcript)
             for i in range(trials)]
    if jobs > 1 and trials > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_one_trial, tasks))
    return [_one_trial(t) for t in tasks]


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def outcome_line(trial: int, seed: int, outcome: ProtocolOutcome) -> str:
    record = {"trial": trial, "seed": seed}
    record.update(outcome.to_record())
    return json.dumps(_clean(record), allow_nan=False)


def gap_scan(d_values, template: dict, trials: int = 1, seed: int = 0,
             jobs: int = 1) -> list[GapRecord]:
    """Run the protocol on honest example pbits of each shield dimension and
    pair the measured key rate with the entanglement bounds."""
    records = []
    for d in d_values:
        d = int(d)
        if not 2 <= d <= MAX_GAP_D:
            raise ValueError(f"shield dimension {d} outside the dense budget [2, {MAX_GAP_D}]")
        spec = example_pbit(d)
        source = SourceSpec(HONEST, spec)
        scenario = Scenario(f"gap-d{d}", dict(template), source, trials)
        results = run_trials(scenario, seed, trials, False, jobs)
        rates = [o.key_rate for o, _ in results]
        aborted = sum(o.aborted for o, _ in results)
        ln = log_negativity(assemble_pdit(spec), (["A", "A'"], ["B", "B'"]))
        records.append(GapRecord(
            d=d,
            key_rate=float(np.mean(rates)),
            ln_per_copy=ln,
            ed_bound=ed_bound_example(d),
            n_used=scenario.protocol_config().n,
            aborted_fraction=aborted / trials,
        ))
    return records


def gap_csv_text(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(GAP_HEADER)
    for r in records:
        writer.writerow([r.d, repr(r.key_rate), repr(r.ln_per_copy), repr(r.ed_bound),
                         repr(r.aborted_fraction)])
    return buf.getvalue()


def write_gap_csv(records, path) -> None:
    _write(path, gap_csv_text(records))


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def run_scenario(path, *, seed: int | None = None, trials: int | None = None,
                 transcript: str | None = None, jobs: int = 1) -> int:
    try:
        scenario = load_scenario(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    master = seed if seed is not None else int(scenario.protocol.get("seed", 0))
    n_trials = trials if trials is not None else scenario.trials
    outputs = {k: scenario.base_dir / v for k, v in scenario.outputs.items() if v}
    if transcript is not None:
        outputs["transcript_ndjson"] = Path(transcript)
    to_stdout = not outputs
    try:
        results = run_trials(scenario, master, n_trials, "transcript_ndjson" in outputs, jobs)
        lines = [outcome_line(i, trial_seed(master, i), o) for i, (o, _) in enumerate(results)]
        if to_stdout:
            print("\n".join(lines))
        elif "outcome_json" in outputs:
            _write(outputs["outcome_json"], "\n".join(lines) + "\n")
        if "transcript_ndjson" in outputs:
            tl = [json.dumps(_clean({"trial": i, **msg}), allow_nan=False)
                  for i, (_, tr) in enumerate(results) for msg in tr]
            _write(outputs["transcript_ndjson"], "\n".join(tl) + "\n")
        if "gap_csv" in outputs:
            records = gap_scan(scenario.gap_d, scenario.protocol, n_trials, master, jobs)
            write_gap_csv(records, outputs["gap_csv"])
        aborted = sum(o.aborted for o, _ in results)
        log.info("%s: %d trials, %d aborted", scenario.name, n_trials, aborted)
    except Exception as exc:  # noqa: BLE001 - reported as exit code 3
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    return 0


def _gap_command(args) -> int:
    template: dict = {"n": 10_000}
    if args.config:
        try:
            with open(args.config, "rb") as fh:
                data = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        template = dict(data.get("protocol", template))
        if "n" not in template:
            print("config error: missing required field 'protocol.n'", file=sys.stderr)
            return 2
    master = args.seed if args.seed is not None else int(template.get("seed", 0))
    try:
        d_values = [int(x) for x in args.d.split(",") if x.strip()]
        records = gap_scan(d_values, template, args.trials or 1, master, args.jobs)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    if args.out:
        write_gap_csv(records, args.out)
    else:
        sys.stdout.write(gap_csv_text(records))
    return 0


def _verify_command(args) -> int:
    from .verify import run_checks

    results = run_checks(seed=args.seed or 0)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pdit-qkd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario file")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--trials", type=int)
    p_run.add_argument("--transcript", help="write public messages as NDJSON here")
    p_run.add_argument("--jobs", type=int, default=1)

    p_gap = sub.add_parser("gap-scan", help="key rate versus entanglement bound scan")
    p_gap.add_argument("--d", default="2,4,8,16")
    p_gap.add_argument("--config", help="scenario file whose [protocol] table is the template")
    p_gap.add_argument("--out")
    p_gap.add_argument("--seed", type=int)
    p_gap.add_argument("--trials", type=int)
    p_gap.add_argument("--jobs", type=int, default=1)

    p_ver = sub.add_parser("verify", help="run the built-in invariant checks")
    p_ver.add_argument("--seed", type=int)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "run":
        return run_scenario(args.config, seed=args.seed, trials=args.trials,
                            transcript=args.transcript, jobs=args.jobs)
    if args.command == "gap-scan":
        return _gap_command(args)
    return _verify_command(args)


if __name__ == "__main__":
    sys.exit(main())
