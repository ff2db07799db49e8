"""Command-line pipelines: run agents, synthesise activations, train SAEs, analyse, intervene, report.

Every command writes into one output directory (``--out``, else ``$TDPROBE_OUT``,
else the config's ``output_dir``) and records each artifact with its sha256
and the hashes of the inputs it was built from in ``manifest.json``.

Exit codes: 0 success, 2 configuration error (including data the config cannot
support, e.g. a walk too short to visit every node), 3 missing or stale upstream
artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import analysis, behavior, store, svg
from .agents import Exploration, run_graph_learners, run_q_agent, sr_fixed_point
from .envs import build_community_graph, env_from_config, random_walk
from .interventions import (CapabilityError, Edit, InterventionPlan, PlanError, ReplaySource,
                            measure_effect, reconstruction_budget, run_with_plan, select_latents)
from .sae import SAETrainConfig, TrainingDiverged, l0_profile, load_model, save_model, train
from .synth import PlantSpec, build_probe_scenario, generate_blocks

log = logging.getLogger("tdprobe")

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULT_SIGNALS = {"two_step": ["td_errors", "q_values", "myopic_values"],
                   "grid_world": ["td_errors", "q_values", "myopic_values"],
                   "graph": ["sr_rows"]}

TASK_DEFAULTS = {
    "two_step": {"n_runs": 100, "agent": {"episodes": 30, "alpha": 0.1, "gamma": 0.99, "window": 1,
                                          "exploration": {"kind": "epsilon", "random_episodes": 7}}},
    "grid_world": {"n_runs": 50, "agent": {"episodes": 50, "alpha": 0.1, "gamma": 0.99, "window": "all",
                                           "analysis_window": 320, "exploration": {"kind": "epsilon"}}},
    "graph": {"n_runs": 20, "agent": {"n_observations": 401, "alpha": 0.05, "gamma": 0.9}},
}

COMMON_DEFAULTS = {
    "output_dir": "tdprobe_out",
    "env": {},
    "agent": {"alpha_decay": None, "analysis_window": None},
    "synth": {"d": 256, "n_atoms": 512, "n_distractors": 50, "distractor_sparsity": 5.0, "noise_std": 0.1,
              "max_cos": 0.3, "seed": 0, "n_blocks": 1, "inject_block": 0, "nonlinearity": "tanh",
              "dtype": "f32"},
    "sae": {},
    "analysis": {"smooth_sigma": 0.5, "n_perm": 1000, "seed": 0, "recovery_threshold": 0.8,
                 "mds_method": "smacof", "no_center": False},
    "behavior": {"models": ["q_learning", "myopic", "repetition"], "window": 1, "information_criteria": False},
    "intervention": {"plan": None, "source": "stack", "signal": "td_errors", "d": 32, "n_blocks": 4,
                     "inject_block": 1, "seed": 0, "beta": 0.1, "lr": 1e-3, "epochs": 300, "batch": 64,
                     "n_perm": 1000},
}


class ConfigError(Exception):
    pass


class DependencyError(Exception):
    pass


# -- configuration ---------------------------------------------------------


def load_schema() -> dict:
    return json.loads(resources.files("tdprobe").joinpath("schema/experiment.schema.json").read_text())


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


def validate_config(raw: dict) -> dict:
    """Schema-check a raw config and fill in task defaults."""
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"  {'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("config does not match the schema:\n" + "\n".join(lines))
    cfg = _merge(_merge(COMMON_DEFAULTS, TASK_DEFAULTS[raw["task"]]), raw)
    cfg.setdefault("seeds", list(range(cfg["n_runs"])))
    if len(cfg["seeds"]) != cfg["n_runs"]:
        if "n_runs" in raw:
            raise ConfigError(f"{len(cfg['seeds'])} seeds given for n_runs={cfg['n_runs']}")
        cfg["n_runs"] = len(cfg["seeds"])
    cfg["synth"].setdefault("signals", DEFAULT_SIGNALS[cfg["task"]])
    syn = cfg["synth"]
    if syn["inject_block"] >= syn["n_blocks"]:
        raise ConfigError("synth.inject_block must be < synth.n_blocks")
    iv = cfg["intervention"]
    if iv["inject_block"] >= iv["n_blocks"] - 1:
        raise ConfigError("intervention.inject_block must leave a downstream block")
    return cfg


# -- workspace / manifest --------------------------------------------------


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    """Output directory plus a manifest of artifact hashes and their provenance."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        else:
            self.manifest = {"version": 1, "artifacts": {}}

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def record(self, rel: str, command: str, inputs: dict[str, str]) -> None:
        self.manifest["artifacts"][rel] = {"sha256": sha256_file(self.root / rel), "command": command,
                                           "inputs": dict(sorted(inputs.items()))}

    def forget(self, prefix: str) -> None:
        for rel in [k for k in self.manifest["artifacts"] if k.startswith(prefix)]:
            del self.manifest["artifacts"][rel]
            (self.root / rel).unlink(missing_ok=True)

    def require(self, rel: str) -> str:
        """Hash of an upstream artifact after checking it exists and is current."""
        entry = self.manifest["artifacts"].get(rel)
        if entry is None:
            raise DependencyError(f"missing upstream artifact {rel} (not in manifest)")
        p = self.root / rel
        if not p.exists():
            raise DependencyError(f"missing upstream artifact {rel} (expected sha256 {entry['sha256']})")
        actual = sha256_file(p)
        if actual != entry["sha256"]:
            raise DependencyError(f"stale artifact {rel}: manifest sha256 {entry['sha256']}, file {actual}")
        for dep, h in entry["inputs"].items():
            if dep == "config.json" or dep.startswith("external:"):
                continue
            cur = self.manifest["artifacts"].get(dep, {}).get("sha256")
            if cur != h:
                raise DependencyError(f"stale artifact {rel}: built from {dep} sha256 {h}, "
                                      f"manifest now has {cur}")
        return entry["sha256"]

    def listed(self, prefix: str, suffix: str = "") -> list[str]:
        return sorted(k for k in self.manifest["artifacts"] if k.startswith(prefix) and k.endswith(suffix))

    def save(self) -> None:
        self.manifest["artifacts"] = dict(sorted(self.manifest["artifacts"].items()))
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def open_workspace(args) -> tuple[Workspace, dict]:
    raw = None
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
    root = args.out or os.environ.get("TDPROBE_OUT")
    if root is None:
        root = (raw or {}).get("output_dir", COMMON_DEFAULTS["output_dir"])
    ws = Workspace(Path(root))
    if raw is None:
        stored = ws.root / "config.json"
        if not stored.exists():
            raise ConfigError("no --config given and no config.json in the output directory")
        raw = json.loads(stored.read_text())
    cfg = validate_config(raw)
    return ws, cfg


def _save_config(ws: Workspace, cfg: dict) -> str:
    _write_json(ws.path("config.json"), cfg)
    ws.record("config.json", "config", {})
    return "config.json"


def _config_hash(ws: Workspace, cfg: dict) -> dict[str, str]:
    """Record the resolved config if it changed; return it as an input."""
    p = ws.root / "config.json"
    text = json.dumps(cfg, indent=2, sort_keys=True) + "\n"
    if not p.exists() or p.read_text() != text or "config.json" not in ws.manifest["artifacts"]:
        _save_config(ws, cfg)
    return {"config.json": ws.manifest["artifacts"]["config.json"]["sha256"]}


# -- run-agent -------------------------------------------------------------


def _run_ids(cfg: dict) -> list[str]:
    return [f"run_{i:03d}" for i in range(cfg["n_runs"])]


def cmd_run_agent(args, ws: Workspace, cfg: dict) -> None:
    inputs = _config_hash(ws, cfg)
    ws.forget("trajectories/")
    ws.forget("signals/")
    a = cfg["agent"]
    task = cfg["task"]
    for run_id, seed in zip(_run_ids(cfg), cfg["seeds"]):
        if task == "graph":
            graph = build_community_graph(seed)
            traj = random_walk(graph, a["n_observations"], seed=seed, run_id=run_id)
            traces = run_graph_learners(traj.states(), graph.n_nodes, a["gamma"], a["alpha"], run_id)
            extra = {"bottleneck": graph.bottleneck.astype(np.int64), "community": graph.community.astype(np.int64),
                     "states": np.asarray(traj.states()[:-1], dtype=np.int64),
                     "oracle_sr": sr_fixed_point(graph.transition_matrix(), a["gamma"])}
        else:
            env = env_from_config({"task": task, **cfg["env"]})
            expl = Exploration(**a["exploration"])
            traj, traces, _ = run_q_agent(env, a["episodes"], a["alpha"], a["gamma"], expl, a["window"], seed,
                                          run_id, a["alpha_decay"])
            extra = {}
        store.write_trajectory(ws.path(f"trajectories/{run_id}.jsonl"), traj)
        ws.record(f"trajectories/{run_id}.jsonl", "run-agent", inputs)
        first = next(iter(traces.values()))
        arrays = {k: tr.values for k, tr in traces.items()} | {"episode": first.episode, "t": first.t} | extra
        store.write_arrays(ws.path(f"signals/{run_id}.arrs"), arrays,
                           {"kind": "signals", "run_id": run_id, "task": task, "seed": seed})
        ws.record(f"signals/{run_id}.arrs", "run-agent", inputs)
    log.info("run-agent: %d %s runs", cfg["n_runs"], task)


def _load_signals(ws: Workspace, cfg: dict) -> tuple[list[dict], dict[str, str]]:
    """Per-run signal arrays (truncated to the analysis window) and their hashes."""
    runs, hashes = [], {}
    window = cfg["agent"].get("analysis_window")
    for run_id in _run_ids(cfg):
        rel = f"signals/{run_id}.arrs"
        hashes[rel] = ws.require(rel)
        arrays, _ = store.read_arrays(ws.root / rel)
        if window:
            n = len(arrays["t"])
            arrays = {k: (v[:window] if v.ndim and len(v) == n else v) for k, v in arrays.items()}
        runs.append(arrays)
    return runs, hashes


# -- gen-synth -------------------------------------------------------------


def _signal_columns(runs: list[dict], names: list[str]):
    cols, labels = [], []
    for name in names:
        if name not in runs[0]:
            raise ConfigError(f"unknown signal {name!r}; available: {sorted(runs[0])}")
        pooled = np.concatenate([np.asarray(r[name], dtype=float) for r in runs])
        pooled = pooled.reshape(len(pooled), -1)
        for j in range(pooled.shape[1]):
            if pooled[:, j].std() > 1e-12:
                cols.append(pooled[:, j])
                labels.append((name, j))
    return cols, labels


def cmd_gen_synth(args, ws: Workspace, cfg: dict) -> None:
    runs, inputs = _load_signals(ws, cfg)
    inputs |= _config_hash(ws, cfg)
    syn = cfg["synth"]
    cols, labels = _signal_columns(runs, syn["signals"])
    spec = PlantSpec(syn["d"], syn["n_atoms"], syn["n_distractors"], syn["distractor_sparsity"], syn["noise_std"],
                     syn["max_cos"], syn["seed"])
    try:
        blocks, coeffs, info = generate_blocks(spec, cols, syn["n_blocks"], syn["inject_block"], syn["nonlinearity"])
    except ValueError as e:
        raise ConfigError(str(e)) from e
    ws.forget("synth/")
    for b, H in enumerate(blocks):
        rel = f"synth/block_{b:02d}.actv"
        store.write_activations(ws.path(rel), H, {"run_id": "pooled", "block": b, "source": "synth",
                                                  "seed": syn["seed"], "dtype": syn["dtype"]})
        ws.record(rel, "gen-synth", inputs)
    store.write_arrays(ws.path("synth/coeffs.arrs"), {"coeffs": coeffs, "dictionary": info["dictionary"]},
                       {"kind": "synth_oracle"})
    ws.record("synth/coeffs.arrs", "gen-synth", inputs)
    offsets = np.cumsum([0] + [len(r["t"]) for r in runs])
    oracle = {
        "planted": [{"signal": s, "column": j, "atom": a} for (s, j), a in zip(labels, info["planted_atoms"])],
        "distractor_atoms": info["distractor_atoms"],
        "runs": [{"run_id": rid, "start": int(lo), "stop": int(hi)}
                 for rid, lo, hi in zip(_run_ids(cfg), offsets[:-1], offsets[1:])],
        "coefficients": "synth/coeffs.arrs",
        "n_blocks": syn["n_blocks"],
        "inject_block": syn["inject_block"] if syn["n_blocks"] > 1 else 0,
    }
    _write_json(ws.path("synth/oracle.json"), oracle)
    ws.record("synth/oracle.json", "gen-synth", inputs)
    log.info("gen-synth: %d blocks x %d steps, %d planted columns", len(blocks), len(blocks[0]), len(cols))


def _oracle(ws: Workspace) -> tuple[dict, dict[str, str]]:
    h = ws.require("synth/oracle.json")
    return json.loads((ws.root / "synth/oracle.json").read_text()), {"synth/oracle.json": h}


def _blocks_arg(args, oracle: dict) -> list[int]:
    blocks = args.block if getattr(args, "block", None) else list(range(oracle["n_blocks"]))
    bad = [b for b in blocks if not 0 <= b < oracle["n_blocks"]]
    if bad:
        raise ConfigError(f"blocks {bad} outside 0..{oracle['n_blocks'] - 1}")
    return blocks


# -- train-sae -------------------------------------------------------------


def _sae_config(cfg: dict) -> SAETrainConfig:
    try:
        return SAETrainConfig(**cfg["sae"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"sae: {e}") from e


def cmd_train_sae(args, ws: Workspace, cfg: dict) -> None:
    oracle, inputs = _oracle(ws)
    inputs |= _config_hash(ws, cfg)
    sae_cfg = _sae_config(cfg)
    for b in _blocks_arg(args, oracle):
        rel = f"synth/block_{b:02d}.actv"
        h = ws.require(rel)
        H, _ = store.read_activations(ws.root / rel)
        model = train(H, sae_cfg, cfg["task"])
        out = f"sae/block_{b:02d}.sae"
        save_model(ws.path(out), model)
        ws.record(out, "train-sae", inputs | {rel: h})
        table = store.ReportTable("sae_loss", [("epoch", "int"), ("loss", "real")],
                                  [[i, float(v)] for i, v in enumerate(model.loss_history)])
        lrel = f"sae/block_{b:02d}_loss.csv"
        store.write_csv(ws.path(lrel), table)
        ws.record(lrel, "train-sae", {out: ws.manifest["artifacts"][out]["sha256"]})
        log.info("train-sae: block %d final loss %.6g", b, model.loss_history[-1])


def _latents(ws: Workspace, b: int):
    rel_a, rel_m = f"synth/block_{b:02d}.actv", f"sae/block_{b:02d}.sae"
    hashes = {rel_a: ws.require(rel_a), rel_m: ws.require(rel_m)}
    H, _ = store.read_activations(ws.root / rel_a)
    model = load_model(ws.root / rel_m)
    return H, model, hashes


def _sae_blocks(ws: Workspace) -> list[int]:
    blocks = [int(Path(p).stem.split("_")[1]) for p in ws.listed("sae/", ".sae")]
    if not blocks:
        raise DependencyError("missing upstream artifact sae/block_XX.sae (run train-sae first)")
    return blocks


# -- analyze ---------------------------------------------------------------


def _pooled(runs: list[dict], name: str) -> np.ndarray:
    return np.concatenate([np.asarray(r[name], dtype=float) for r in runs])


def analyze_corr(args, ws: Workspace, cfg: dict) -> None:
    runs, inputs = _load_signals(ws, cfg)
    oracle, h = _oracle(ws)
    inputs |= h | _config_hash(ws, cfg)
    an = cfg["analysis"]
    sigma = an["smooth_sigma"] if args.smooth_sigma is None else args.smooth_sigma
    latents = {}
    for b in _sae_blocks(ws):
        H, model, hashes = _latents(ws, b)
        inputs |= hashes
        latents[b] = model.encode_raw(H)
    signals = {name: _pooled(runs, name) for name in cfg["synth"]["signals"]}
    table = analysis.correlation_report(latents, signals, sigma, an["n_perm"], an["seed"])
    store.write_csv(ws.path("analysis/corr.csv"), table)
    ws.record("analysis/corr.csv", "analyze corr", inputs)
    series = {}
    for name in sorted(signals):
        rows = [r for r in table.as_dicts() if r["signal"] == name]
        series[name] = ([r["block"] for r in rows], [r["smoothed_abs_r"] for r in rows])
    svg.save(ws.path("analysis/corr.svg"), svg.line_plot(series, "max |r| per block (smoothed)", "block", "|r|"))
    ws.record("analysis/corr.svg", "analyze corr", {"analysis/corr.csv": ws.manifest["artifacts"]["analysis/corr.csv"]["sha256"]})


def analyze_cka(args, ws: Workspace, cfg: dict) -> None:
    runs, inputs = _load_signals(ws, cfg)
    oracle, h = _oracle(ws)
    inputs |= h | _config_hash(ws, cfg)
    center = not cfg["analysis"]["no_center"]
    table = store.ReportTable("cka", [("block", "int"), ("signal", "string"), ("cka", "real")])
    for b in range(oracle["n_blocks"]):
        rel = f"synth/block_{b:02d}.actv"
        inputs[rel] = ws.require(rel)
        H, _ = store.read_activations(ws.root / rel)
        for name in cfg["synth"]["signals"]:
            S = _pooled(runs, name)
            table.append([b, name, analysis.cka(H, S.reshape(len(S), -1), center=center)])
    store.write_csv(ws.path("analysis/cka.csv"), table)
    ws.record("analysis/cka.csv", "analyze cka", inputs)


def _graph_only(cfg: dict, what: str) -> None:
    if cfg["task"] != "graph":
        raise ConfigError(f"analyze {what} needs task 'graph', config has {cfg['task']!r}")


def _representations(ws: Workspace, cfg: dict, runs: list[dict]):
    """Per-run feature sources: oracle SR, learned SR and every synthetic block present."""
    sources = {"oracle_sr": [r["oracle_sr"] for r in runs],
               "learned_sr": [analysis.last_encounter(r["states"], r["sr_rows"], len(r["bottleneck"])) for r in runs]}
    hashes = {}
    if "synth/oracle.json" in ws.manifest["artifacts"]:
        oracle, h = _oracle(ws)
        hashes |= h
        for b in range(oracle["n_blocks"]):
            rel = f"synth/block_{b:02d}.actv"
            hashes[rel] = ws.require(rel)
            H, _ = store.read_activations(ws.root / rel)
            sources[f"block_{b:02d}"] = [analysis.last_encounter(r["states"], H[o["start"]:o["stop"]],
                                                                 len(r["bottleneck"]))
                                         for r, o in zip(runs, oracle["runs"])]
    return sources, hashes


def analyze_mds(args, ws: Workspace, cfg: dict) -> None:
    _graph_only(cfg, "mds")
    runs, inputs = _load_signals(ws, cfg)
    sources, h = _representations(ws, cfg, runs)
    inputs |= h | _config_hash(ws, cfg)
    an = cfg["analysis"]
    table = store.ReportTable("mds", [("source", "string"), ("run_id", "string"), ("within", "real"),
                                      ("between", "real"), ("stress", "real"), ("n_iterations", "int")])
    coords_table = store.ReportTable("mds_coords", [("source", "string"), ("state", "int"), ("community", "int"),
                                                    ("bottleneck", "int"), ("x", "real"), ("y", "real")])
    for name, feats in sources.items():
        for i, (run_id, X) in enumerate(zip(_run_ids(cfg), feats)):
            res = analysis.mds(analysis.cosine_dissimilarity(X), 2, an["seed"] + i, method=an["mds_method"])
            within, between = analysis.community_separation(res.coords, runs[i]["community"])
            table.append([name, run_id, within, between, res.stress, res.n_iterations])
            if i == 0:
                for s, (x, y) in enumerate(res.coords):
                    coords_table.append([name, s, int(runs[0]["community"][s]), int(runs[0]["bottleneck"][s]),
                                         float(x), float(y)])
                svg.save(ws.path(f"analysis/mds_{name}.svg"),
                         svg.scatter_plot(res.coords, runs[0]["community"], [str(s) for s in range(len(X))],
                                          f"MDS of {name} ({run_id})", "dim 1", "dim 2"))
                ws.record(f"analysis/mds_{name}.svg", "analyze mds", inputs)
    store.write_csv(ws.path("analysis/mds.csv"), table)
    ws.record("analysis/mds.csv", "analyze mds", inputs)
    store.write_csv(ws.path("analysis/mds_coords.csv"), coords_table)
    ws.record("analysis/mds_coords.csv", "analyze mds", inputs)


def analyze_decode(args, ws: Workspace, cfg: dict) -> None:
    _graph_only(cfg, "decode")
    runs, inputs = _load_signals(ws, cfg)
    sources, h = _representations(ws, cfg, runs)
    inputs |= h | _config_hash(ws, cfg)
    seed = cfg["analysis"]["seed"]
    table = store.ReportTable("decode", [("source", "string"), ("accuracy", "real"), ("n_test", "int"),
                                         ("shuffled_accuracy", "real"), ("chance_lo", "real"),
                                         ("chance_hi", "real")])
    for name, feats in sources.items():
        rng = np.random.default_rng(seed)
        X, y, Xs, ys = [], [], [], []
        for r, F in zip(runs, feats):
            lab = r["bottleneck"].astype(bool)
            keep = analysis.balanced_subsample(lab, rng)
            X.append(F[keep])
            y.append(lab[keep])
            ys.append(rng.permutation(lab[keep]))
        res = analysis.decode_bottleneck(X, y)
        shuf = analysis.decode_bottleneck(X, ys)
        lo, hi = analysis.binomial_band(res.n_test)
        table.append([name, res.accuracy, res.n_test, shuf.accuracy, lo, hi])
    store.write_csv(ws.path("analysis/decode.csv"), table)
    ws.record("analysis/decode.csv", "analyze decode", inputs)


def analyze_l0(args, ws: Workspace, cfg: dict) -> None:
    inputs = _config_hash(ws, cfg)
    table = store.ReportTable("l0", [("block", "int"), ("l0", "int"), ("n_latents", "int")])
    for b in _sae_blocks(ws):
        H, model, hashes = _latents(ws, b)
        inputs |= hashes
        table.append([b, l0_profile(model, H), model.m])
    store.write_csv(ws.path("analysis/l0.csv"), table)
    ws.record("analysis/l0.csv", "analyze l0", inputs)


ANALYSES = {"corr": analyze_corr, "cka": analyze_cka, "mds": analyze_mds, "decode": analyze_decode, "l0": analyze_l0}


def cmd_analyze(args, ws: Workspace, cfg: dict) -> None:
    ANALYSES[args.what](args, ws, cfg)


# -- intervene -------------------------------------------------------------

EFFECT_COLUMNS = [("condition", "string"), ("metric", "string"), ("baseline", "real"), ("intervened", "real"),
                  ("delta", "real"), ("null_lo", "real"), ("null_hi", "real"), ("significant", "int")]


def _add_effects(table: store.ReportTable, effects: store.ReportTable, condition: str) -> None:
    for row in effects.rows:
        table.append([condition] + row)


def _intervene_stack(ws: Workspace, cfg: dict, inputs: dict) -> None:
    iv = cfg["intervention"]
    runs, h = _load_signals(ws, cfg)
    inputs |= h
    name = iv["signal"]
    if name not in runs[0] or np.asarray(runs[0][name]).ndim != 1:
        raise ConfigError(f"intervention.signal must name a scalar signal, got {name!r}")
    raw = _pooled(runs, name)
    sig = raw - raw.min()
    sc = build_probe_scenario(sig, d=iv["d"], n_blocks=iv["n_blocks"], inject_block=iv["inject_block"],
                              seed=iv["seed"])
    b, last = sc.inject_block, sc.stack.blocks - 1
    acts, _ = sc.stack.forward(sc.inputs)
    sae_cfg = SAETrainConfig(beta=iv["beta"], lr=iv["lr"], epochs=iv["epochs"], batch=iv["batch"], seed=iv["seed"])
    saes = {k: train(acts[k], sae_cfg) for k in sorted({b, last})}
    clean = run_with_plan(sc.stack, InterventionPlan(), saes, sc.inputs, targets=sc.targets)
    base = run_with_plan(sc.stack, InterventionPlan([], True, [b]), saes, sc.inputs, targets=sc.targets)
    top, control, r = select_latents(saes[b].encode_raw(acts[b]), sig)
    if iv["plan"]:
        plan = _load_plan(iv["plan"])
        inputs["external:" + iv["plan"]] = sha256_file(Path(iv["plan"]))
        conditions = {"plan": plan}
    else:
        conditions = {"best_latent": InterventionPlan([Edit(b, top[0])], True, [b]),
                      "control_latent": InterventionPlan([Edit(b, control[0])], True, [b])}
    table = store.ReportTable("effects", EFFECT_COLUMNS)
    for cond, plan in conditions.items():
        bad = [e.block for e in plan.edits if e.block not in saes]
        if bad:
            raise ConfigError(f"plan edits blocks {bad}; SAEs exist for blocks {sorted(saes)}")
        plan = InterventionPlan(plan.edits, True, sorted(set(plan.reconstruct_blocks) | {b}))
        out = run_with_plan(sc.stack, plan, saes, sc.inputs, targets=sc.targets)
        for metric in ("next_state_accuracy", "nll_vs_model"):
            _add_effects(table, measure_effect(base, out, metric, iv["n_perm"], iv["seed"]), cond)
        _add_effects(table, measure_effect(base, out, "downstream_max_corr", min(iv["n_perm"], 200),
                                                  iv["seed"], saes[last], last, sig), cond)
        _write_json(ws.path(f"interventions/plan_{cond}.json"), plan.to_json())
        ws.record(f"interventions/plan_{cond}.json", "intervene", inputs)
        rel = f"interventions/{cond}_block_{last:02d}.actv"
        store.write_activations(ws.path(rel), out.activations[last],
                                {"run_id": "pooled", "block": last, "source": f"intervene:{cond}",
                                 "seed": iv["seed"], "dtype": "f64"})
        ws.record(rel, "intervene", inputs)
    budget = reconstruction_budget(sc.stack, clean, b, base.activations[b])
    flips = float(np.mean(clean.predictions != base.predictions))
    table.append(["reconstruction_only", "action_agreement", 1.0, 1.0 - flips, -flips, -budget, 0.0,
                       int(flips > budget)])
    store.write_csv(ws.path("interventions/effects.csv"), table)
    ws.record("interventions/effects.csv", "intervene", inputs)
    summary = {"inject_block": b, "readout_block": last, "best_latent": top[0], "best_r": float(r[top[0]]),
               "control_latent": control[0], "control_r": float(r[control[0]]), "reconstruction_budget": budget,
               "reconstruction_flips": flips}
    _write_json(ws.path("interventions/summary.json"), summary)
    ws.record("interventions/summary.json", "intervene", inputs)


def _load_plan(path: str) -> InterventionPlan:
    try:
        return InterventionPlan.load(path)
    except (OSError, json.JSONDecodeError, KeyError, PlanError, TypeError, ValueError) as e:
        raise ConfigError(f"cannot load plan {path}: {e}") from e


def _intervene_replay(ws: Workspace, cfg: dict, inputs: dict) -> None:
    iv = cfg["intervention"]
    if not iv["plan"]:
        raise ConfigError("replay interventions need intervention.plan")
    plan = _load_plan(iv["plan"])
    inputs["external:" + iv["plan"]] = sha256_file(Path(iv["plan"]))
    oracle, h = _oracle(ws)
    inputs |= h
    runs, hs = _load_signals(ws, cfg)
    inputs |= hs
    acts, saes = [], {}
    for b in range(oracle["n_blocks"]):
        rel = f"synth/block_{b:02d}.actv"
        inputs[rel] = ws.require(rel)
        acts.append(store.read_activations(ws.root / rel)[0])
    for b in plan.blocks:
        rel = f"sae/block_{b:02d}.sae"
        inputs[rel] = ws.require(rel)
        saes[b] = load_model(ws.root / rel)
    source = ReplaySource(acts)
    base = run_with_plan(source, InterventionPlan([], True, plan.blocks), saes)
    out = run_with_plan(source, plan, saes)
    sig = _pooled(runs, iv["signal"])
    table = store.ReportTable("effects", EFFECT_COLUMNS)
    for b in plan.blocks:
        _add_effects(table, measure_effect(base, out, "downstream_max_corr", min(iv["n_perm"], 200),
                                                  iv["seed"], saes[b], b, sig), f"block_{b:02d}")
        rel = f"interventions/replay_block_{b:02d}.actv"
        store.write_activations(ws.path(rel), out.activations[b], {"run_id": "pooled", "block": b,
                                                                   "source": "intervene:replay",
                                                                   "seed": iv["seed"], "dtype": "f64"})
        ws.record(rel, "intervene", inputs)
    store.write_csv(ws.path("interventions/effects.csv"), table)
    ws.record("interventions/effects.csv", "intervene", inputs)


def cmd_intervene(args, ws: Workspace, cfg: dict) -> None:
    if args.plan:
        cfg["intervention"]["plan"] = args.plan
    inputs = _config_hash(ws, cfg)
    ws.forget("interventions/")
    if cfg["intervention"]["source"] == "replay":
        _intervene_replay(ws, cfg, inputs)
    else:
        _intervene_stack(ws, cfg, inputs)


# -- fit-behavior ----------------------------------------------------------


def cmd_fit_behavior(args, ws: Workspace, cfg: dict) -> None:
    if cfg["task"] == "graph":
        raise ConfigError("fit-behavior needs a task with choices (two_step or grid_world)")
    inputs = _config_hash(ws, cfg)
    bh = cfg["behavior"]
    fits = None
    wins = {m: 0 for m in bh["models"]}
    for run_id in _run_ids(cfg):
        rel = f"trajectories/{run_id}.jsonl"
        inputs[rel] = ws.require(rel)
        traj = store.load_trajectory(ws.root / rel)
        table = behavior.compare(traj, bh["models"], information_criteria=bh["information_criteria"],
                                 window=bh["window"])
        if fits is None:
            fits = store.ReportTable("behavior_fits", [("run_id", "string")] + table.columns)
        for row in table.rows:
            fits.append([run_id] + row)
        wins[table.rows[0][0]] += 1
    store.write_csv(ws.path("behavior/fits.csv"), fits)
    ws.record("behavior/fits.csv", "fit-behavior", inputs)
    summary = store.ReportTable("behavior_summary", [("model", "string"), ("wins", "int"), ("total_nll", "real")])
    for m in bh["models"]:
        summary.append([m, wins[m], float(sum(r[2] for r in fits.rows if r[1] == m))])
    store.write_csv(ws.path("behavior/summary.csv"), summary)
    ws.record("behavior/summary.csv", "fit-behavior", inputs)


# -- report ----------------------------------------------------------------


def _md_table(table: store.ReportTable, limit: int = 40) -> str:
    def cell(v):
        if v is None:
            return ""
        if isinstance(v, str) and any(c in v for c in ".eE") and v.lstrip("-").replace(".", "", 1).replace("e-", "", 1).replace("e+", "", 1).isdigit():
            v = float(v)
        return f"{v:.4g}" if isinstance(v, float) else str(v)

    names = table.column_names
    lines = ["| " + " | ".join(names) + " |", "|" + "---|" * len(names)]
    for row in table.rows[:limit]:
        lines.append("| " + " | ".join(cell(v) for v in row) + " |")
    if len(table.rows) > limit:
        lines.append(f"\n({len(table.rows) - limit} more rows in the CSV)")
    return "\n".join(lines)


REPORT_SECTIONS = [
    ("analysis/corr.csv", "Latent-signal correlations per block"),
    ("analysis/cka.csv", "CKA between blocks and signals"),
    ("analysis/l0.csv", "L0 profile"),
    ("analysis/mds.csv", "MDS community structure"),
    ("analysis/decode.csv", "Bottleneck decoding"),
    ("behavior/summary.csv", "Behavioural model comparison"),
    ("interventions/effects.csv", "Intervention effects"),
]


def recovery_verdict(ws: Workspace, cfg: dict) -> tuple[str, list[str]]:
    """PASS when every planted signal is recovered above the threshold at and after the injection block."""
    if "analysis/corr.csv" not in ws.manifest["artifacts"]:
        return "NOT AVAILABLE", ["analysis/corr.csv is missing; run `tdprobe analyze corr`"]
    ws.require("analysis/corr.csv")
    oracle = json.loads((ws.root / "synth/oracle.json").read_text())
    table = store.read_csv(ws.root / "analysis/corr.csv")
    thr = cfg["analysis"]["recovery_threshold"]
    notes, ok = [], True
    for row in table.as_dicts():
        if int(row["block"]) < oracle["inject_block"]:
            continue
        passed = float(row["abs_r"]) >= thr
        null = row["null_95"]
        if null not in (None, ""):
            passed = passed and float(row["abs_r"]) > float(null)
        ok &= passed
        notes.append(f"block {row['block']} {row['signal']}: |r| = {float(row['abs_r']):.3f} "
                     f"({'ok' if passed else 'below'} threshold {thr})")
    return ("PASS" if ok else "FAIL"), notes


def cmd_report(args, ws: Workspace, cfg: dict) -> None:
    inputs = _config_hash(ws, cfg)
    parts = [f"# tdprobe report: {cfg['task']}", "",
             f"{cfg['n_runs']} runs, seeds {cfg['seeds'][0]}..{cfg['seeds'][-1]}.", ""]
    for rel, title in REPORT_SECTIONS:
        if rel not in ws.manifest["artifacts"]:
            continue
        inputs[rel] = ws.require(rel)
        parts += [f"## {title}", "", _md_table(store.read_csv(ws.root / rel)), ""]
        stem = str(Path(rel).with_suffix(""))
        figs = [p for p in ws.listed(stem, ".svg")]
        parts += [f"![{Path(p).stem}]({p})" for p in figs] + ([""] if figs else [])
    verdict, notes = recovery_verdict(ws, cfg)
    parts += ["## Recovery verdict", ""] + [f"- {n}" for n in notes] + ["", f"**Recovery verdict: {verdict}**", ""]
    ws.path("report.md").write_text("\n".join(parts))
    ws.record("report.md", "report", inputs)
    print(f"Recovery verdict: {verdict}")


# -- entry point -----------------------------------------------------------

COMMANDS = {"run-agent": cmd_run_agent, "gen-synth": cmd_gen_synth, "train-sae": cmd_train_sae,
            "analyze": cmd_analyze, "intervene": cmd_intervene, "fit-behavior": cmd_fit_behavior,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON); defaults to <out>/config.json")
    common.add_argument("--out", help="output directory (overrides $TDPROBE_OUT and the config)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="tdprobe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run-agent", parents=[common], help="run reference agents, log trajectories and signals")
    sub.add_parser("gen-synth", parents=[common], help="plant agent signals into synthetic activations")
    p = sub.add_parser("train-sae", parents=[common], help="train one SAE per block")
    p.add_argument("--block", type=int, action="append", help="block index (repeatable; default all)")
    p = sub.add_parser("analyze", parents=[common], help="correlation / CKA / MDS / decoding / L0 analyses")
    p.add_argument("what", choices=sorted(ANALYSES))
    p.add_argument("--smooth-sigma", type=float, default=None, help="Gaussian smoothing over blocks (corr)")
    p = sub.add_parser("intervene", parents=[common], help="lesion or clamp SAE latents and measure effects")
    p.add_argument("--plan", help="intervention plan JSON (overrides the config)")
    sub.add_parser("fit-behavior", parents=[common], help="fit behavioural models to logged choices")
    sub.add_parser("report", parents=[common], help="assemble report.md with the recovery verdict")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        ws, cfg = open_workspace(args)
        COMMANDS[args.command](args, ws, cfg)
        ws.save()
    except (ConfigError, CapabilityError, PlanError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except analysis.AnalysisError as e:
        print(f"analysis error (check the config against the data): {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as e:
        print(f"dependency error: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (TrainingDiverged, store.NonFiniteError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
