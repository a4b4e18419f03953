"""Command-line surface: anchor, process, train-toy, simulate, report, replay.

Every command resolves its flags into a plain config dict, runs a pure
function of that dict, and writes a run manifest next to its outputs. The
replay command re-executes a manifest and verifies the regenerated outputs
hash-match the recorded ones. Exit codes: 0 success, 1 domain rejection
(filter/divergence/mismatch), 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .anchoring import (
    CHEST,
    TimestampError,
    HAND,
    anchor_node,
    anchor_result_to_dict,
    cross_node_transform,
    load_detections,
    load_extrinsics,
    load_trajectories,
)
from .diffusion import (
    ACTION_DIM,
    ActionChunkTensor,
    DEFAULT_HORIZON,
    TrainConfig,
    TrainingDivergedError,
    ddim_sample,
    load_checkpoint,
    model_eps_fn,
    obs_to_condition,
    save_checkpoint,
    train_toy,
)
from .geometry import Pose3
from .jsonl import read_json, read_jsonl, write_json
from .manifest import RunManifest
from .pipeline import (
    GripperCalib,
    PipelineConfig,
    PipelineError,
    RawSession,
    assemble_dataset,
    lateral_quantile,
    load_dataset,
    make_action_labels,
    project_nonholonomic,
    save_dataset,
)
from .report import load_metrics, write_report
from .sim import (
    Condition,
    CruisePolicy,
    DEFAULT_CALIB,
    ExpertReplayPolicy,
    PlantConfig,
    SCENARIO_NAMES,
    _trial_task_frame,
    make_scenario,
    run_episode,
    scripted_expert,
)
from .executor import ExecutorConfig, LatencyConfig, PredictedState

EXIT_OK = 0
EXIT_REJECTED = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


class DomainError(Exception):
    pass


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# anchor
# ---------------------------------------------------------------------------


def cmd_anchor(cfg: dict) -> RunManifest:
    trajs = load_trajectories(_require_file(cfg["trajectories"], "trajectory file"))
    dets = load_detections(_require_file(cfg["detections"], "detection file"))
    exts = load_extrinsics(_require_file(cfg["extrinsics"], "extrinsics file"))
    for node in (CHEST, HAND):
        if node not in trajs:
            raise UsageError(f"trajectory stream for node {node!r} missing")
        if node not in exts:
            raise UsageError(f"extrinsic for node {node!r} missing")
    results = {}
    for node in (CHEST, HAND):
        try:
            results[node] = anchor_node(
                trajs[node], exts[node], dets, cov_threshold=cfg["cov_threshold"]
            )
        except ValueError as exc:
            raise DomainError(str(exc)) from exc
    if any(r.ill_conditioned for r in results.values()):
        raise DomainError("anchoring ill-conditioned: rotation spread exceeds 90 degrees")
    cross = cross_node_transform(
        results[CHEST].T_world_tag, results[HAND].T_world_tag
    )
    out = {
        "anchors": {n: anchor_result_to_dict(r) for n, r in results.items()},
        "cross_node": cross.to_list(),
    }
    write_json(cfg["output"], out)
    for n, r in results.items():
        print(
            f"{n}: {r.detection_count} detections, residual RMS "
            f"{r.position_rms * 1e3:.2f} mm / {np.degrees(r.rotation_rms):.3f} deg"
        )
    man = RunManifest("anchor", cfg, seed=0)
    for label in ("trajectories", "detections", "extrinsics"):
        man.add_input(label, cfg[label])
    man.add_output(cfg["output"])
    return man


# ---------------------------------------------------------------------------
# process
# ---------------------------------------------------------------------------


def _load_raw_session(raw_dir: Path, cross_node: Pose3) -> RawSession:
    trajs = load_trajectories(_require_file(raw_dir / "trajectories.jsonl", "trajectories"))
    for node in (CHEST, HAND):
        if node not in trajs:
            raise UsageError(f"trajectory stream for node {node!r} missing")
    markers = list(read_jsonl(_require_file(raw_dir / "markers.jsonl", "marker stream")))
    if not markers:
        raise DomainError("marker stream is empty")
    return RawSession(
        session_id=raw_dir.name,
        chest=trajs[CHEST],
        hand=trajs[HAND],
        cross_node=cross_node,
        marker_t=np.array([m["t"] for m in markers], dtype=float),
        marker_d=np.array([m["distance_m"] for m in markers], dtype=float),
    )


def cmd_process(cfg: dict) -> RunManifest:
    raw_dir = _require_file(cfg["raw"], "raw session directory")
    anchor_doc = read_json(_require_file(cfg["anchor"], "anchor file"))
    cross = Pose3.from_list(anchor_doc["cross_node"])
    if cfg.get("calib"):
        cal_doc = read_json(_require_file(cfg["calib"], "calibration file"))
        calib = GripperCalib(float(cal_doc["d_closed"]), float(cal_doc["d_open"]))
    else:
        calib = DEFAULT_CALIB
    session = _load_raw_session(raw_dir, cross)
    pipe_cfg = PipelineConfig(smoothing=cfg["smoothing"])
    try:
        dataset = assemble_dataset(session, calib, pipe_cfg)
    except (PipelineError, TimestampError) as exc:
        raise DomainError(str(exc)) from exc

    out_dir = Path(cfg["output"])
    out_dir.mkdir(parents=True, exist_ok=True)
    save_dataset(out_dir / "dataset.jsonl", dataset)
    write_json(out_dir / "filter_report.json", dataset.filter_report.to_dict())
    _, residuals = project_nonholonomic([s.base for s in dataset.steps], dt=0.1)
    q99 = lateral_quantile(residuals)
    print(f"{len(dataset)} steps, lateral q0.99 = {q99:.4f} m/s")

    man = RunManifest("process", cfg, seed=0)
    man.add_input("raw", raw_dir)
    man.add_input("anchor", cfg["anchor"])
    man.add_output(out_dir / "dataset.jsonl")
    man.add_output(out_dir / "filter_report.json")
    return man


# ---------------------------------------------------------------------------
# train-toy
# ---------------------------------------------------------------------------


def _dataset_to_pairs(dataset) -> tuple[np.ndarray, np.ndarray]:
    """(condition, next-action) training pairs from one processed demo."""
    labels = make_action_labels(dataset)
    conds = []
    prev = np.zeros(ACTION_DIM)
    for i in range(len(labels)):
        s = dataset.steps[i]
        conds.append(
            obs_to_condition(s.base, s.hand_rel, s.grip, prev, np.zeros(0))
        )
        prev = labels[i]
    return np.array(conds), labels


def cmd_train_toy(cfg: dict) -> RunManifest:
    dataset = load_dataset(_require_file(cfg["dataset"], "dataset file"))
    if len(dataset) < 2:
        raise UsageError("dataset too small to form training pairs")
    conds, a0s = _dataset_to_pairs(dataset)
    train_cfg = TrainConfig(steps=cfg["steps"], seed=cfg["seed"])
    try:
        model, sched, curve = train_toy(conds, a0s, train_cfg)
    except TrainingDivergedError as exc:
        raise DomainError(f"training diverged at step {exc}") from exc

    out_dir = Path(cfg["output"])
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "model.json"
    save_checkpoint(ckpt, model, sched, meta={"seed": cfg["seed"], "steps": cfg["steps"]})
    with open(out_dir / "curve.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, loss in enumerate(curve):
            w.writerow([i, f"{loss:.6e}"])
    print(f"final loss {curve[-1]:.4e} over {len(curve)} steps")

    man = RunManifest("train-toy", cfg, seed=cfg["seed"])
    man.add_input("dataset", cfg["dataset"])
    man.add_output(ckpt)
    man.add_output(out_dir / "curve.csv")
    return man


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


class DiffusionReplayPolicy:
    """Policy adapter around a trained checkpoint.

    Samples one 11-D action row at a time (the condition includes the
    previous row), chaining horizon rows into a chunk. Sampling is seeded
    from the observation timestamp so repeated runs are deterministic.
    """

    def __init__(self, checkpoint_path, horizon: int = DEFAULT_HORIZON, seed: int = 0):
        self.model, self.sched, _ = load_checkpoint(checkpoint_path)
        self.horizon = horizon
        self.seed = seed
        self._eps_fn = model_eps_fn(self.model)
        self._calls = 0

    def __call__(self, obs: PredictedState, obs_t: float) -> ActionChunkTensor:
        rng = np.random.default_rng([self.seed, 0xD1, self._calls])
        self._calls += 1
        rows = np.zeros((self.horizon, ACTION_DIM))
        prev = np.zeros(ACTION_DIM)
        for r in range(self.horizon):
            cond = obs_to_condition(obs.base, obs.hand_rel, obs.grip, prev, np.zeros(0))
            row = ddim_sample(
                self._eps_fn, cond, self.sched, rng=rng, sample_dim=ACTION_DIM
            )[0]
            rows[r] = row
            prev = row
        return ActionChunkTensor(rows, t0_obs=obs_t).canonicalized()


def _make_policy(cfg: dict, scenario, trial_seed: int, task_frame):
    source = cfg["policy"]
    if source == "replay":
        expert = scripted_expert(scenario, seed=trial_seed)
        return ExpertReplayPolicy(
            expert, task_frame=task_frame, label_frame=cfg["label"]
        )
    if source == "cruise":
        return CruisePolicy()
    return DiffusionReplayPolicy(_require_file(source, "policy checkpoint"), seed=trial_seed)


def cmd_simulate(cfg: dict) -> RunManifest:
    if cfg["scenario"] not in SCENARIO_NAMES:
        raise UsageError(
            f"unknown scenario {cfg['scenario']!r}; choose from {', '.join(SCENARIO_NAMES)}"
        )
    scenario = make_scenario(cfg["scenario"])
    plant_cfg = PlantConfig(kinematic=cfg["kinematic"])
    cond = Condition(
        name=f"match_{'on' if cfg['matching'] else 'off'}_label_{cfg['label']}",
        matching=cfg["matching"],
        label_frame=cfg["label"],
        latency_ms=cfg["latency_ms"],
        jitter_ms=cfg["jitter_ms"],
        locomotion_variation=cfg["variation"],
    )
    rows = []
    for trial in range(cfg["trials"]):
        trial_seed = int(
            np.random.SeedSequence([cfg["seed"], trial]).generate_state(1)[0]
        )
        frame = _trial_task_frame(trial_seed, cond.locomotion_variation)
        policy = _make_policy(cfg, scenario, trial_seed, frame)
        lat = LatencyConfig.scaled_to(cond.latency_ms / 1000.0)
        lat.jitter_std = cond.jitter_ms / 1000.0
        exec_cfg = ExecutorConfig(
            matching=cond.matching,
            latency=lat,
            plant_response_s=0.0 if plant_cfg.kinematic else plant_cfg.tau_base,
        )
        metrics, _ = run_episode(
            policy, scenario, plant_cfg, exec_cfg, trial_seed, task_frame=frame
        )
        row = {"condition": cond.name, "scenario": cfg["scenario"], "trial": trial}
        row.update(metrics.to_row())
        rows.append(row)

    out_dir = Path(cfg["output"])
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    n = len(rows)
    aggregate = {
        cond.name: {
            "trials": n,
            "success_rate": sum(r["success"] for r in rows) / n,
            "mean_time_s": round(float(np.mean([r["completion_time_s"] for r in rows])), 3),
            "mean_rollbacks": round(float(np.mean([r["rollbacks"] for r in rows])), 3),
            "mean_jitter": round(float(np.mean([r["jitter"] for r in rows])), 3),
            "i_star_mean": round(float(np.mean([r["i_star_mean"] for r in rows])), 3),
        }
    }
    write_json(out_dir / "aggregate.json", aggregate)
    a = aggregate[cond.name]
    print(
        f"{cond.name}: {n} trials, success {a['success_rate']:.1%}, "
        f"rollbacks {a['mean_rollbacks']}, jitter {a['mean_jitter']}, "
        f"i* {a['i_star_mean']}"
    )

    man = RunManifest("simulate", cfg, seed=cfg["seed"])
    if cfg["policy"] not in ("replay", "cruise"):
        man.add_input("policy", cfg["policy"])
    man.add_output(metrics_path)
    man.add_output(out_dir / "aggregate.json")
    return man


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def cmd_report(cfg: dict) -> RunManifest:
    paths = [_require_file(p, "metrics file") for p in cfg["metrics"]]
    rows = load_metrics(paths)
    if not rows:
        raise DomainError("metrics files contain no episodes")
    written = write_report(rows, cfg["output"], title=cfg["title"])
    print(f"wrote {', '.join(str(p) for p in written)}")
    man = RunManifest("report", cfg, seed=0)
    for i, p in enumerate(paths):
        man.add_input(f"metrics_{i}", p)
    for p in written:
        man.add_output(p)
    return man


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

_COMMANDS = {
    "anchor": cmd_anchor,
    "process": cmd_process,
    "train-toy": cmd_train_toy,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def cmd_replay(cfg: dict) -> RunManifest:
    recorded = RunManifest.load(_require_file(cfg["manifest"], "manifest"))
    if recorded.command not in _COMMANDS:
        raise UsageError(f"manifest records unknown command {recorded.command!r}")
    man = _COMMANDS[recorded.command](recorded.config)
    mismatched = [
        path
        for path, digest in recorded.outputs.items()
        if man.outputs.get(path) != digest
    ]
    if mismatched:
        raise DomainError(
            "replay outputs differ from manifest: " + ", ".join(mismatched)
        )
    print(f"replay of {recorded.command!r} reproduced {len(man.outputs)} outputs")
    return man


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2 already; keep message
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mobman", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("anchor", help="average board detections into a cross-node transform")
    a.add_argument("--trajectories", required=True)
    a.add_argument("--detections", required=True)
    a.add_argument("--extrinsics", required=True)
    a.add_argument("--output", required=True)
    a.add_argument("--cov-threshold", type=float, default=0.01)

    pr = sub.add_parser("process", help="raw capture session -> 10 Hz demo dataset")
    pr.add_argument("--raw", required=True, help="session directory")
    pr.add_argument("--anchor", required=True, help="anchor JSON from the anchor command")
    pr.add_argument("--calib", default=None, help="gripper calibration JSON")
    pr.add_argument("--output", required=True)
    pr.add_argument("--no-smoothing", dest="smoothing", action="store_false")

    tr = sub.add_parser("train-toy", help="train the toy denoiser on a demo dataset")
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--output", required=True)
    tr.add_argument("--steps", type=int, default=3000)
    tr.add_argument("--seed", type=int, default=0)

    si = sub.add_parser("simulate", help="run seeded episodes under one condition")
    si.add_argument("--scenario", default="nav_reach")
    si.add_argument("--policy", default="replay", help="'replay', 'cruise' or checkpoint path")
    si.add_argument("--matching", choices=("on", "off"), default="on")
    si.add_argument("--label", choices=("relative", "global"), default="relative")
    si.add_argument("--latency-ms", type=float, default=142.0)
    si.add_argument("--jitter-ms", type=float, default=0.0)
    si.add_argument("--trials", type=int, default=10)
    si.add_argument("--seed", type=int, default=0)
    si.add_argument("--kinematic", action="store_true")
    si.add_argument("--variation", action="store_true", help="per-trial task-frame shift")
    si.add_argument("--output", required=True)

    re = sub.add_parser("report", help="render metrics CSVs into markdown + SVG")
    re.add_argument("--metrics", nargs="+", required=True)
    re.add_argument("--output", required=True)
    re.add_argument("--title", default="Condition comparison")

    rp = sub.add_parser("replay", help="re-run a manifest and verify identical outputs")
    rp.add_argument("--manifest", required=True)
    return p


def _args_to_config(args: argparse.Namespace) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k != "command"}
    if args.command == "simulate":
        cfg["matching"] = cfg["matching"] == "on"
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _args_to_config(args)
        if args.command == "replay":
            man = cmd_replay(cfg)
        else:
            man = _COMMANDS[args.command](cfg)
            out = cfg.get("output", cfg.get("manifest"))
            base = Path(out)
            man_path = (
                base / "manifest.json" if base.is_dir() else base.with_suffix(".manifest.json")
            )
            man.save(man_path)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DomainError as exc:
        print(f"rejected: {exc}", file=sys.stderr)
        return EXIT_REJECTED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
