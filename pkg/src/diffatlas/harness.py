"""Experiment orchestration: dataset generation, per-paradigm training,
inference, evaluation, and cross-run report collation.

Every command is a deterministic function of (config, seed). Run artifacts
live under run_dir/<paradigm>_<setting>_seed<k>/. DIFFATLAS_THREADS caps
sample-level parallelism for inference/evaluation (default 1); outputs do
not depend on the thread count.
"""

import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import diffusion, metrics, phantom
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .nets import NoisePredictor, SegNet
from .paradigms import AtlasBank, segment_diffatlas, segment_icf, segment_icmd, segment_rba
from .rng import Rng, mix_seeds
from .tensor import AdamState, Tape, adam_step, backward, seg_loss


def _thread_count() -> int:
    raw = os.environ.get("DIFFATLAS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise RuntimeError(f"DIFFATLAS_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def _map_samples(fn, items):
    n = _thread_count()
    if n == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def run_dir_for(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.run_dir) / f"{cfg.paradigm}_{cfg.setting}_seed{seed}"


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(cfg: ExperimentConfig) -> Path:
    """Write train/test phantoms for both domains plus a JSON manifest."""
    data_dir = Path(cfg.data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "resolution": cfg.resolution,
        "num_classes": cfg.num_classes,
        "d_max": cfg.d_max,
        "splits": {},
    }
    for domain_name in ("A", "B"):
        dom = phantom.get_domain(domain_name, cfg.num_classes)
        train = phantom.make_dataset(cfg.n_train, cfg.train_seed_base, dom,
                                     cfg.resolution, cfg.resolution, cfg.d_max)
        test = phantom.make_dataset(cfg.n_test, cfg.test_seed_base, dom,
                                    cfg.resolution, cfg.resolution, cfg.d_max)
        manifest["splits"][f"train{domain_name}"] = phantom.save_samples(
            train, data_dir, f"train{domain_name}")
        manifest["splits"][f"test{domain_name}"] = phantom.save_samples(
            test, data_dir, f"test{domain_name}")
    path = data_dir / "manifest.json"
    phantom.write_manifest(path, manifest)
    return path


def load_split(cfg: ExperimentConfig, split: str, domain: str):
    """Rehydrate one split ('train' or 'test') for one domain from disk."""
    data_dir = Path(cfg.data_dir)
    manifest = phantom.read_manifest(data_dir / "manifest.json")
    if manifest["resolution"] != cfg.resolution or manifest["num_classes"] != cfg.num_classes:
        raise RuntimeError("dataset on disk does not match the config "
                           f"({manifest['resolution']}px/{manifest['num_classes']} classes "
                           f"vs {cfg.resolution}px/{cfg.num_classes})")
    records = manifest["splits"][f"{split}{domain}"]
    return [phantom.load_sample(data_dir, rec, cfg.num_classes, cfg.d_max)
            for rec in records]


def _training_samples(cfg: ExperimentConfig):
    samples = load_split(cfg, "train", cfg.train_domain)
    return samples[:cfg.effective_n_train]


# ---------------------------------------------------------------------------
# train


def _maybe_flip(sample, rng: Rng):
    if rng.next_u64() % 2 == 0:
        return sample
    return phantom.PhantomSample(
        image=sample.image[:, :, ::-1].copy(),
        labels=sample.labels[:, ::-1].copy(),
        sdf=sample.sdf[:, :, ::-1].copy(),
        domain=sample.domain,
        seed=sample.seed,
    )


def _pick_batch(samples, cfg, rng: Rng):
    batch = [samples[rng.randint(0, len(samples) - 1)] for _ in range(cfg.batch_size)]
    if cfg.augment_flip:
        batch = [_maybe_flip(s, rng) for s in batch]
    return batch


def train_segnet_step(net: SegNet, batch, opt: AdamState) -> float:
    images = np.stack([s.image for s in batch])
    labels = np.stack([s.labels for s in batch])
    tape = Tape()
    logits = net.forward(images, tape)
    loss = seg_loss(logits, labels, tape)
    backward(loss, tape)
    adam_step(list(net.params.values()), opt)
    return float(loss.data)


def train_one(cfg: ExperimentConfig, seed: int) -> Path:
    """Train (or materialize, for RBA) one run; write checkpoint + loss trace."""
    out = run_dir_for(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    samples = _training_samples(cfg)
    trace = []

    if cfg.paradigm == "rba":
        bank = samples[:min(cfg.atlas_bank_size, len(samples))]
        tensors = {}
        for i, s in enumerate(bank):
            tensors[f"atlas/{i:04d}/image"] = s.image
            tensors[f"atlas/{i:04d}/labels"] = s.labels.astype(np.float32)
    else:
        rng = Rng(seed).split("train")
        if cfg.paradigm == "icf":
            model = SegNet(cfg.num_classes, cfg.base_width, seed=seed)
            opt = AdamState(model.params.values(), lr=cfg.lr)
            step_fn = lambda batch: train_segnet_step(model, batch, opt)
        else:
            mode = "joint" if cfg.paradigm == "diffatlas" else "conditional"
            sched = diffusion.make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
            model = NoisePredictor(mode, cfg.num_classes, cfg.base_width,
                                   cfg.time_embed_dim, seed=seed)
            opt = AdamState(model.params.values(), lr=cfg.lr)
            train_fn = (diffusion.train_step_joint if mode == "joint"
                        else diffusion.train_step_conditional)
            step_fn = lambda batch: train_fn(model, batch, rng, sched, opt)
        for step in range(1, cfg.train_steps + 1):
            batch = _pick_batch(samples, cfg, rng)
            loss = step_fn(batch)
            if not math.isfinite(loss):
                raise RuntimeError(f"NaN/Inf loss at step {step} "
                                   f"({cfg.paradigm}/{cfg.setting}/seed{seed}); aborting")
            if step % 50 == 0:
                trace.append((step, loss))
        tensors = {name: p.data for name, p in model.params.items()}

    save_checkpoint(out / "checkpoint.datl", tensors, cfg.hash_bytes())
    with open(out / "loss_trace.csv", "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for step, loss in trace:
            fh.write(f"{step},{loss:.6f}\n")
    with open(out / "run.json", "w", encoding="utf-8") as fh:
        json.dump({"paradigm": cfg.paradigm, "setting": cfg.setting, "seed": seed,
                   "config_hash": cfg.hash_hex()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def cmd_train(cfg: ExperimentConfig):
    return [train_one(cfg, seed) for seed in cfg.seeds]


# ---------------------------------------------------------------------------
# infer


def _rebuild_model(cfg: ExperimentConfig, tensors: dict):
    if cfg.paradigm == "rba":
        images, labels = [], []
        idx = 0
        while f"atlas/{idx:04d}/image" in tensors:
            images.append(tensors[f"atlas/{idx:04d}/image"].astype(np.float32))
            labels.append(tensors[f"atlas/{idx:04d}/labels"].astype(np.int16))
            idx += 1
        if not images:
            raise CheckpointError("RBA checkpoint holds no atlas entries")
        return AtlasBank(images, labels)
    if cfg.paradigm == "icf":
        model = SegNet(cfg.num_classes, cfg.base_width, seed=0)
    else:
        mode = "joint" if cfg.paradigm == "diffatlas" else "conditional"
        model = NoisePredictor(mode, cfg.num_classes, cfg.base_width,
                               cfg.time_embed_dim, seed=0)
    if set(model.params) != set(tensors):
        raise CheckpointError("checkpoint parameter names do not match the model")
    for name, p in model.params.items():
        if p.data.shape != tensors[name].shape:
            raise CheckpointError(f"checkpoint tensor {name} has shape "
                                  f"{tensors[name].shape}, expected {p.data.shape}")
        p.data[...] = tensors[name]
    return model


def load_run_model(cfg: ExperimentConfig, seed: int, checkpoint_path=None):
    path = Path(checkpoint_path) if checkpoint_path else run_dir_for(cfg, seed) / "checkpoint.datl"
    tensors = load_checkpoint(path, cfg.hash_bytes())
    return _rebuild_model(cfg, tensors)


def infer_one(cfg: ExperimentConfig, seed: int, checkpoint_path=None, split: str = "test") -> Path:
    """Predict label maps for every sample of the routed split; one PGM each."""
    model = load_run_model(cfg, seed, checkpoint_path)
    domain = cfg.test_domain if split == "test" else cfg.train_domain
    samples = load_split(cfg, split, domain)
    sched = None
    if cfg.paradigm in ("icmd", "diffatlas"):
        sched = diffusion.make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)

    def predict(sample):
        if cfg.paradigm == "icf":
            return segment_icf(model, sample.image)
        if cfg.paradigm == "rba":
            return segment_rba(sample.image, model, cfg.register_lambda,
                               cfg.register_iters, cfg.register_lr)
        chain_seed = mix_seeds(seed, sample.seed)
        if cfg.paradigm == "icmd":
            return segment_icmd(model, sample.image, sched, chain_seed)
        return segment_diffatlas(model, sample.image, sched, chain_seed, cfg.ensemble_n)

    preds = _map_samples(predict, samples)
    out = run_dir_for(cfg, seed) / f"preds_{split}"
    out.mkdir(parents=True, exist_ok=True)
    for sample, pred in zip(samples, preds):
        phantom.write_pgm(out / f"pred_{sample.seed:08d}.pgm", pred.astype(np.uint8))
    return out


def cmd_infer(cfg: ExperimentConfig, checkpoint_path=None, split: str = "test"):
    return [infer_one(cfg, seed, checkpoint_path, split) for seed in cfg.seeds]


# ---------------------------------------------------------------------------
# eval


def eval_one(cfg: ExperimentConfig, seed: int, preds_dir=None, split: str = "test") -> Path:
    domain = cfg.test_domain if split == "test" else cfg.train_domain
    samples = load_split(cfg, split, domain)
    preds_dir = Path(preds_dir) if preds_dir else run_dir_for(cfg, seed) / f"preds_{split}"
    pred_paths = [preds_dir / f"pred_{s.seed:08d}.pgm" for s in samples]
    missing = [str(p) for p in pred_paths if not p.exists()]
    if missing:
        raise RuntimeError(f"missing predictions for {len(missing)} samples, "
                           f"first: {missing[0]}")
    preds = [phantom.read_pgm(p).astype(np.int16) for p in pred_paths]
    gts = [s.labels for s in samples]
    pairs = list(zip(preds, gts))

    def one_class(cls):
        ds = [metrics.dice(p, g, cls) for p, g in pairs]
        ns = [metrics.nsd(p, g, cls, cfg.tau) for p, g in pairs]
        return float(np.mean(ds)), float(np.mean(ns))

    per_class = dict(zip(range(1, cfg.num_classes + 1),
                         _map_samples(one_class, range(1, cfg.num_classes + 1))))
    report = metrics.MetricsReport(
        per_class=per_class,
        average=(float(np.mean([v[0] for v in per_class.values()])),
                 float(np.mean([v[1] for v in per_class.values()]))),
        n_samples=len(pairs),
    )
    out = run_dir_for(cfg, seed) / f"eval_{split}.csv"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(metrics.report_to_csv(report, cfg.paradigm, cfg.setting))
    return out


def cmd_eval(cfg: ExperimentConfig, preds_dir=None, split: str = "test"):
    return [eval_one(cfg, seed, preds_dir, split) for seed in cfg.seeds]


# ---------------------------------------------------------------------------
# report


def _read_eval_avg(run_path: Path):
    """(paradigm, setting, seed, dice, nsd) from a completed run dir, or None."""
    run_meta = run_path / "run.json"
    evals = sorted(run_path.glob("eval_*.csv"))
    if not run_meta.exists() or not evals:
        return None
    with open(run_meta, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    with open(evals[0], "r", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    avg = [r for r in rows if r["class"] == "avg"]
    if not avg:
        return None
    return (meta["paradigm"], meta["setting"], int(meta["seed"]),
            float(avg[0]["dice"]), float(avg[0]["nsd"]))


def cmd_report(run_dirs, out_path) -> Path:
    """Collate per-run averages into one CSV: a row per (paradigm, setting,
    seed), a mean row per (paradigm, setting), and a best=1 marker for the
    best-mean-dice paradigm(s) in each setting."""
    rows = []
    for rd in run_dirs:
        rd = Path(rd)
        candidates = [rd] if (rd / "run.json").exists() else sorted(rd.iterdir())
        for cand in candidates:
            if not cand.is_dir():
                continue
            rec = _read_eval_avg(cand)
            if rec is None:
                print(f"warning: skipping incomplete run dir {cand}", file=sys.stderr)
                continue
            rows.append(rec)
    if not rows:
        raise RuntimeError("no completed runs found to report on")
    means = {}
    for paradigm, setting, _, d, s in rows:
        means.setdefault((paradigm, setting), []).append((d, s))
    mean_rows = {key: (float(np.mean([v[0] for v in vals])),
                       float(np.mean([v[1] for v in vals])))
                 for key, vals in means.items()}
    best_by_setting = {}
    for (paradigm, setting), (d, _) in mean_rows.items():
        best_by_setting.setdefault(setting, []).append((d, paradigm))
    best = {setting: {p for d, p in vals if d == max(v[0] for v in vals)}
            for setting, vals in best_by_setting.items()}
    out_path = Path(out_path)
    with open(out_path, "w", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["paradigm", "setting", "seed", "dice", "nsd", "best"])
        for paradigm, setting, seed, d, s in sorted(rows):
            writer.writerow([paradigm, setting, seed, f"{d:.6f}", f"{s:.6f}", ""])
        for (paradigm, setting) in sorted(mean_rows):
            d, s = mean_rows[(paradigm, setting)]
            mark = 1 if paradigm in best[setting] else ""
            writer.writerow([paradigm, setting, "mean", f"{d:.6f}", f"{s:.6f}", mark])
    return out_path
