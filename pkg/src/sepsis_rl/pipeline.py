"""Pipeline stages. Each stage reads its inputs from the run directory, writes its
outputs there, and records both in ``manifest.json``.

Run directory layout::

    cohort.csv  cohort_stats.json  graph_check.json
    splits.json  standardizer.json
    encoder/<label>/autoencoder_{best,final}.ckpt  loss.jsonl  [sweep/ sweep_summary.csv]
    latents/<label>/{trainval,test}.ckpt            (untrained: latents/<label>/seed_<s>/)
    bc/bc.ckpt  bc/loss.jsonl
    policy/<label>/seed_<s>.jsonl  q_seed_<s>.ckpt  wis_curve.csv  baseline.json
    evaluation.json  wis.svg  manifest.json
"""

from __future__ import annotations

import concurrent.futures
import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import config_hash, load_checkpoint, load_module_state, save_checkpoint, save_module
from .cohort import (
    Cohort,
    Standardizer,
    cohort_stats,
    filter_short,
    generate_synthetic,
    load_csv,
    save_csv,
    stratified_split,
)
from .config import RunConfig
from .errors import ConfigError, DataError, MissingArtifactError
from .evaluation import EvalCurve, WisEvaluator, plot_curves_svg
from .policy import BehaviorPolicy, DbcqAgent, bc_dataset, train_behavior_cloning, dbcq_train
from .training import (
    LatentDataset,
    LatentTrajectory,
    build_models,
    encode_dataset,
    run_sweep,
    train_autoencoder,
    untrained_encoder,
)
from .trajgraph import build_trajectory_graph, snapshots, validate_graph

log = logging.getLogger(__name__)

THREADS_ENV = "SEPSIS_RL_THREADS"


# ------------------------------------------------------------------ plumbing


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_text(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")


def thread_cap() -> int:
    raw = os.environ.get(THREADS_ENV, "1").strip() or "1"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, os.cpu_count() or 1) if n <= 0 else n


class Run:
    """A run directory plus its manifest."""

    def __init__(self, config: RunConfig):
        self.config = config.effective()
        self.root = Path(self.config.out)
        self.root.mkdir(parents=True, exist_ok=True)

    # paths
    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    @property
    def label(self) -> str:
        return f"{self.config.encoder}-untrained" if self.config.untrained_encoder else self.config.encoder

    def encoder_dir(self) -> Path:
        return self.path("encoder", self.config.encoder)

    def latent_dir(self, seed: int | None = None) -> Path:
        d = self.path("latents", self.label)
        return d / f"seed_{seed}" if self.config.untrained_encoder else d

    def policy_dir(self) -> Path:
        return self.path("policy", self.label)

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(f"{path} is missing; run the '{stage}' stage first")
        return path

    # manifest
    def record(self, stage: str, inputs: list[Path], outputs: list[Path], seconds: float,
               info: dict | None = None) -> None:
        mpath = self.path("manifest.json")
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {"stages": {}}
        manifest["config"] = self.config.to_dict()
        manifest["config_hash"] = config_hash(manifest["config"])
        manifest["stages"][stage] = {
            "inputs": {self._rel(p): sha256_file(p) for p in inputs},
            "outputs": sorted(self._rel(p) for p in outputs),
            "seconds": round(seconds, 3),
            **({"info": info} if info else {}),
        }
        write_json(mpath, manifest)

    def _rel(self, p: Path) -> str:
        p = Path(p)
        try:
            return str(p.resolve().relative_to(self.root.resolve()))
        except ValueError:
            return str(p)

    # shared loaders
    def cohort(self) -> Cohort:
        return load_csv(self.require(self.path("cohort.csv"), "generate"), self.config.schema)

    def splits(self) -> tuple[Cohort, Cohort, Cohort]:
        """Standardized (train, val, test), as recorded by train-encoder."""
        cohort = self.cohort()
        ids = json.loads(self.require(self.path("splits.json"), "train-encoder").read_text())
        std = Standardizer.from_dict(json.loads(self.require(self.path("standardizer.json"),
                                                             "train-encoder").read_text()))
        by_id = {t.id: t for t in cohort.trajectories}
        try:
            parts = [cohort.subset(by_id[i] for i in ids[k]) for k in ("train", "val", "test")]
        except KeyError as exc:
            raise DataError(f"splits.json names trajectory {exc} not present in cohort.csv") from None
        return tuple(std.transform(p) for p in parts)


def _timed(fn):
    def wrapper(run: Run, *a, **kw):
        t0 = time.perf_counter()
        inputs, outputs, info = fn(run, *a, **kw)
        run.record(fn.__name__.replace("stage_", "").replace("_", "-"), inputs, outputs,
                   time.perf_counter() - t0, info)
        return info
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# -------------------------------------------------------------------- stages


@_timed
def stage_generate(run: Run):
    """Synthetic cohort -> cohort.csv."""
    cfg = run.config
    cohort, removed = filter_short(generate_synthetic(cfg.cohort, cfg.cohort_seed, cfg.schema))
    out = run.path("cohort.csv")
    save_csv(cohort, out)
    stats = {**cohort_stats(cohort).as_dict(), "removed_single_step": removed}
    write_json(run.path("cohort_stats.json"), stats)
    return [], [out, run.path("cohort_stats.json")], stats


@_timed
def stage_ingest(run: Run):
    """External CSV -> validated, filtered cohort.csv."""
    cfg = run.config
    if cfg.data is None:
        raise MissingArtifactError("ingest needs a data file (paths.data in the config)")
    src = Path(cfg.data)
    cohort, removed = filter_short(load_csv(src, cfg.schema))
    out = run.path("cohort.csv")
    save_csv(cohort, out)
    stats = {**cohort_stats(cohort).as_dict(), "removed_single_step": removed}
    write_json(run.path("cohort_stats.json"), stats)
    return [src], [out, run.path("cohort_stats.json")], stats


@_timed
def stage_graph_check(run: Run):
    """Build every trajectory graph and snapshot and check the structural invariants."""
    cohort = run.cohort()
    violations = []
    n_snap = 0
    for t in cohort.trajectories:
        g = build_trajectory_graph(t, cohort.schema)
        problems = validate_graph(g)
        for s in snapshots(g):
            n_snap += 1
            problems += validate_graph(s)
        violations += [f"{t.id}: {p}" for p in problems]
    report = {"graphs": len(cohort), "snapshots": n_snap, "violations": violations}
    out = run.path("graph_check.json")
    write_json(out, report)
    if violations:
        raise DataError(f"{len(violations)} graph violation(s); first: {violations[0]}")
    return [run.path("cohort.csv")], [out], {"graphs": len(cohort), "snapshots": n_snap}


def write_splits(run: Run) -> tuple[list[Path], list[Path]]:
    """Stratified 70/15/15 split ids and training-split standardization statistics."""
    cohort = run.cohort()
    train, val, test = stratified_split(cohort, seed=run.config.split_seed)
    write_json(run.path("splits.json"), {"train": train.ids, "val": val.ids, "test": test.ids})
    write_json(run.path("standardizer.json"), Standardizer.fit(train).to_dict())
    return [run.path("cohort.csv")], [run.path("splits.json"), run.path("standardizer.json")]


def _save_pair(path: Path, encoder, decoder, kind: str, fingerprint: str, meta: dict) -> None:
    tensors = {f"encoder.{k}": v for k, v in encoder.state_dict().items()}
    tensors.update({f"decoder.{k}": v for k, v in decoder.state_dict().items()})
    meta = {**meta, "encoder_config": encoder.config, "decoder_config": decoder.config}
    save_checkpoint(path, tensors, kind, fingerprint, meta)


def _save_result(d: Path, res, cfg, fingerprint: str) -> list[Path]:
    kind = f"autoencoder-{cfg.variant}"
    meta = {"seed": cfg.seed, "config_hash": config_hash(cfg.__dict__), "best_epoch": res.best_epoch}
    best_enc, best_dec = res.best_models()
    _save_pair(d / "autoencoder_best.ckpt", best_enc, best_dec, kind, fingerprint, meta)
    _save_pair(d / "autoencoder_final.ckpt", res.encoder, res.decoder, kind, fingerprint, meta)
    write_text(d / "loss.jsonl", res.curve.to_jsonl())
    return [d / "autoencoder_best.ckpt", d / "autoencoder_final.ckpt", d / "loss.jsonl"]


@_timed
def stage_train_encoder(run: Run):
    """Split, standardize, train the autoencoder (or a sweep of them)."""
    cfg = run.config
    inputs, outputs = write_splits(run)
    train, val, _ = run.splits()
    fp = train.schema.fingerprint()
    d = run.encoder_dir()
    info: dict = {}
    if cfg.sweep:
        if cfg.encoder == "ae":
            raise ConfigError("a sweep grid applies to GNN encoders only")
        sweep = run_sweep(cfg.sweep, cfg.repr, train, val)
        rows = sweep.summary_rows()
        for rc, res in sweep.runs:
            outputs += _save_result(d / "sweep" / f"f{rc.f_out}_n{rc.n_conv}", res, rc, fp)
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        write_text(d / "sweep_summary.csv", buf.getvalue())
        outputs.append(d / "sweep_summary.csv")
        best = dict(sweep.runs)[sweep.best]
        rc = sweep.best
        info["selected"] = {"f_out": rc.f_out, "n_conv": rc.n_conv}
    else:
        rc = cfg.repr.resolved()
        best = train_autoencoder(train, val, rc)
    outputs += _save_result(d, best, rc, fp)
    info.update({"best_epoch": best.best_epoch, "best_val_loss": best.best_val_loss})
    return inputs, outputs, info


def load_encoder(run: Run):
    """Best encoder from train-encoder."""
    path = run.require(run.encoder_dir() / "autoencoder_best.ckpt", "train-encoder")
    cohort_schema = run.config.schema.storage()
    header, tensors = load_checkpoint(path, f"autoencoder-{run.config.encoder}", cohort_schema.fingerprint())
    meta = header["metadata"]
    ec, dc = meta["encoder_config"], meta["decoder_config"]
    rc = replace(run.config.repr.resolved(), f_out=ec.get("f_out"), n_conv=ec.get("n_conv"),
                 latent_dim=ec["latent_dim"], action_injection=dc["action_injection"])
    ni = len(cohort_schema.invariant_names)
    nv = len(cohort_schema.variant_names)
    enc, _ = build_models(rc, ni, nv, dc["obs_dim"])
    enc.load_state_dict({k[len("encoder."):]: v for k, v in tensors.items() if k.startswith("encoder.")})
    return enc


def save_latents(path: Path, ds: LatentDataset, metadata: dict) -> None:
    tensors = {
        "latents": np.concatenate([t.latents for t in ds.trajectories]),
        "actions": np.concatenate([t.actions for t in ds.trajectories]).astype(float),
        "lengths": np.array([t.T for t in ds.trajectories], dtype=float),
        "rewards": np.array([t.reward for t in ds.trajectories], dtype=float),
    }
    save_checkpoint(path, tensors, "latents", metadata=metadata | {"ids": [t.id for t in ds.trajectories]})


def load_latents(path: Path) -> LatentDataset:
    header, t = load_checkpoint(path, "latents")
    ids = header["metadata"]["ids"]
    offsets = np.concatenate([[0], np.cumsum(t["lengths"].astype(int))])
    return LatentDataset([
        LatentTrajectory(ids[k], t["latents"][a:b], t["actions"][a:b].astype(np.int64), int(t["rewards"][k]))
        for k, (a, b) in enumerate(zip(offsets[:-1], offsets[1:]))
    ])


@_timed
def stage_encode(run: Run):
    """Encode train+val and test splits to latent trajectories."""
    cfg = run.config
    outputs = []
    if cfg.untrained_encoder and not run.path("splits.json").exists():
        outputs += write_splits(run)[1]  # no train-encoder stage on this path
    train, val, test = run.splits()
    trainval = train.subset(list(train.trajectories) + list(val.trajectories))
    info: dict = {}
    if cfg.untrained_encoder:
        inputs = [run.path("splits.json"), run.path("standardizer.json")]
        for s in cfg.seeds:
            enc = untrained_encoder(cfg.encoder, train, s)
            d = run.latent_dir(s)
            meta = {"encoder": f"random-init, seed={s}"}
            save_latents(d / "trainval.ckpt", encode_dataset(trainval, enc), meta)
            save_latents(d / "test.ckpt", encode_dataset(test, enc), meta)
            outputs += [d / "trainval.ckpt", d / "test.ckpt"]
            info[f"seed_{s}"] = meta["encoder"]
    else:
        ckpt = run.encoder_dir() / "autoencoder_best.ckpt"
        enc = load_encoder(run)
        inputs = [run.path("splits.json"), run.path("standardizer.json"), ckpt]
        d = run.latent_dir()
        meta = {"encoder": f"trained {cfg.encoder}"}
        save_latents(d / "trainval.ckpt", encode_dataset(trainval, enc), meta)
        save_latents(d / "test.ckpt", encode_dataset(test, enc), meta)
        outputs += [d / "trainval.ckpt", d / "test.ckpt"]
        info["encoder"] = meta["encoder"]
    return inputs, outputs, info


@_timed
def stage_train_bc(run: Run):
    """Behavior cloning on raw standardized train+val observations."""
    cfg = run.config
    train, val, _ = run.splits()
    obs, actions = bc_dataset(train.subset(list(train.trajectories) + list(val.trajectories)))
    curve = []
    model = train_behavior_cloning(obs, actions, cfg.bc, on_epoch=lambda e, v: curve.append((e, v)))
    out = run.path("bc", "bc.ckpt")
    save_module(out, model, BehaviorPolicy.kind, train.schema.fingerprint(),
                {"seed": cfg.bc.seed, "config_hash": config_hash(cfg.bc.__dict__)})
    write_text(run.path("bc", "loss.jsonl"), "".join(json.dumps({"epoch": e, "loss": v}) + "\n" for e, v in curve))
    return ([run.path("splits.json"), run.path("standardizer.json")],
            [out, run.path("bc", "loss.jsonl")], {"final_loss": curve[-1][1]})


def load_bc(run: Run, schema_fp: str) -> BehaviorPolicy:
    path = run.require(run.path("bc", "bc.ckpt"), "train-bc")
    header, _ = load_checkpoint(path)
    model = BehaviorPolicy(**header["metadata"]["module_config"])
    load_module_state(path, model, BehaviorPolicy.kind, schema_fp)
    model.train_mode(False)
    return model


def _latent_paths(run: Run, seed: int) -> tuple[Path, Path]:
    d = run.latent_dir(seed)
    return run.require(d / "trainval.ckpt", "encode"), run.require(d / "test.ckpt", "encode")


def _policy_seed(run: Run, seed: int, bc: BehaviorPolicy, test_raw: Cohort) -> dict:
    cfg = run.config
    trainval_path, test_path = _latent_paths(run, seed)
    pool = load_latents(trainval_path).transitions()
    evaluator = WisEvaluator(load_latents(test_path), test_raw, bc, cfg.wis, cfg.dbcq.threshold)
    res = dbcq_train(pool, replace(cfg.dbcq, seed=seed), evaluator)
    d = run.policy_dir()
    rows = [{"iteration": i, "td_loss": v} for i, v in res.td_losses]
    rows += [{"iteration": i, "wis": v} for i, v in zip(res.eval_iterations, res.eval_scores)]
    rows.sort(key=lambda r: (r["iteration"], "wis" in r))
    write_text(d / f"seed_{seed}.jsonl", "".join(json.dumps(r) + "\n" for r in rows))
    save_module(d / f"q_seed_{seed}.ckpt", res.agent, DbcqAgent.kind,
                metadata={"seed": seed, "config_hash": config_hash(cfg.dbcq.__dict__)})
    return {"iterations": res.eval_iterations, "scores": res.eval_scores,
            "uniform": evaluator.uniform_score(), "behavior": evaluator.behavior_score()}


@_timed
def stage_train_policy(run: Run):
    """dBCQ per seed, WIS curve per seed, aggregated EMA curve and plot."""
    cfg = run.config
    _, _, test_raw = run.splits()
    bc = load_bc(run, test_raw.schema.fingerprint())
    for s in cfg.seeds:
        _latent_paths(run, s)
    workers = min(thread_cap(), len(cfg.seeds))
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(workers) as ex:
            futures = {s: ex.submit(_policy_seed, run, s, bc, test_raw) for s in cfg.seeds}
            results = {s: f.result() for s, f in futures.items()}
    else:
        results = {s: _policy_seed(run, s, bc, test_raw) for s in cfg.seeds}
    d = run.policy_dir()
    its = results[cfg.seeds[0]]["iterations"]
    curve = EvalCurve(its, {s: r["scores"] for s, r in results.items()})
    write_text(d / "wis_curve.csv", curve.to_csv())
    # the uniform policy's WIS does not depend on training; it is constant in iteration
    first = results[cfg.seeds[0]]
    baseline = {"uniform": first["uniform"], "behavior": first["behavior"]}
    write_json(d / "baseline.json", baseline)
    plot_curves_svg({run.label: curve.to_csv()}, d / "wis.svg", title=f"WIS ({run.label})")
    mean, std = curve.mean_std()
    outputs = [d / f"seed_{s}.jsonl" for s in cfg.seeds] + [d / f"q_seed_{s}.ckpt" for s in cfg.seeds]
    outputs += [d / "wis_curve.csv", d / "baseline.json", d / "wis.svg"]
    inputs = [run.path("bc", "bc.ckpt"), run.path("splits.json"), run.path("standardizer.json")]
    for s in dict.fromkeys(cfg.seeds):
        inputs += list(_latent_paths(run, s))
    info = {"final_smoothed_wis_mean": float(mean[-1]), "final_smoothed_wis_std": float(std[-1]),
            **baseline}
    if cfg.untrained_encoder:
        info["encoder"] = {str(s): f"random-init, seed={s}" for s in cfg.seeds}
    return list(dict.fromkeys(inputs)), outputs, info


@_timed
def stage_evaluate(run: Run):
    """Re-score the saved Q-networks on the test split; compare with uniform and behavior policies."""
    cfg = run.config
    _, _, test_raw = run.splits()
    bc = load_bc(run, test_raw.schema.fingerprint())
    report: dict = {"seeds": {}}
    inputs = [run.path("bc", "bc.ckpt")]
    for s in cfg.seeds:
        qpath = run.require(run.policy_dir() / f"q_seed_{s}.ckpt", "train-policy")
        header, _ = load_checkpoint(qpath)
        agent = DbcqAgent(**header["metadata"]["module_config"])
        load_module_state(qpath, agent, DbcqAgent.kind)
        _, test_path = _latent_paths(run, s)
        ev = WisEvaluator(load_latents(test_path), test_raw, bc, cfg.wis, cfg.dbcq.threshold)
        report["seeds"][str(s)] = ev(agent)
        report["uniform"] = ev.uniform_score()
        report["behavior"] = ev.behavior_score()
        inputs += [qpath, test_path]
    scores = list(report["seeds"].values())
    report["mean"] = float(np.mean(scores))
    report["std"] = float(np.std(scores))
    out = run.path("evaluation.json")
    write_json(out, report)
    return list(dict.fromkeys(inputs)), [out], report


@_timed
def stage_plot(run: Run):
    """wis.svg from every aggregated curve CSV in the run directory."""
    csvs = sorted(run.path("policy").glob("*/wis_curve.csv")) if run.path("policy").exists() else []
    if not csvs:
        raise MissingArtifactError(f"no WIS curve under {run.path('policy')}; run the 'train-policy' stage first")
    out = run.path("wis.svg")
    plot_curves_svg({p.parent.name: p.read_text() for p in csvs}, out)
    return csvs, [out], {"curves": [p.parent.name for p in csvs]}


def reproduce(run: Run) -> dict:
    cfg = run.config
    (stage_ingest if cfg.data else stage_generate)(run)
    stage_graph_check(run)
    if not cfg.untrained_encoder:
        stage_train_encoder(run)
    stage_encode(run)
    stage_train_bc(run)
    stage_train_policy(run)
    report = stage_evaluate(run)
    stage_plot(run)
    return report


STAGES = {
    "generate": stage_generate,
    "ingest": stage_ingest,
    "graph-check": stage_graph_check,
    "train-encoder": stage_train_encoder,
    "encode": stage_encode,
    "train-bc": stage_train_bc,
    "train-policy": stage_train_policy,
    "evaluate": stage_evaluate,
    "plot": stage_plot,
}
