"""Experiment drivers behind the command line: training and the two sweeps."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import subprocess
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import netcore as nc
from .dataproc import TextDataset, load_dataset, make_batches, random_sequences, sample_by_length
from .encoder import EncoderClassifier, EncoderConfig
from .identifiability import (augment_ones, check_constraints, iter_atilde_softmax, nullity_formulas,
                              summarize_softmax_samples)
from .linalg import SINGLE_EPS, numerical_rank, read_matrix_csv, write_matrix_csv

log = logging.getLogger(__name__)

PRESETS = {
    "desk": {"encoder": {"d_e": 128, "h": 8, "d_s_max": 128, "ffn_hidden": 512}, "epochs": 5},
    "paper": {"encoder": {"d_e": 512, "h": 8, "d_s_max": 512, "ffn_hidden": 2048}, "epochs": 20},
}


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 256
    clip_len: int | None = None
    manifest: str | None = None
    seed: int = 0
    out_dir: str = "runs/default"
    experiment: str = "train"
    rank_eps: float = SINGLE_EPS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        enc = EncoderConfig.from_dict(d.pop("encoder", {}))
        return cls(encoder=enc, **d)

    @property
    def effective_clip_len(self) -> int:
        return self.clip_len or self.encoder.d_s_max


def merge_config(base: dict, override: dict) -> dict:
    """Recursive dict merge; ``override`` wins."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], value)
        else:
            out[key] = value
    return out


def build_config(preset: str | None = None, config_file: str | None = None,
                 overrides: dict | None = None) -> RunConfig:
    """Defaults, then preset, then JSON config file, then explicit overrides.

    ``d_k``/``d_v`` left unset are re-derived from the final ``d_e``, ``h``
    and variant.
    """
    d: dict = {"encoder": {}}
    if preset:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}")
        d = merge_config(d, PRESETS[preset])
    if config_file:
        d = merge_config(d, json.loads(Path(config_file).read_text(encoding="utf-8")))
    if overrides:
        d = merge_config(d, overrides)
    return RunConfig.from_dict(d)


@lru_cache(maxsize=1)
def build_id() -> str:
    """Package version plus the git commit of the source tree when available."""
    try:
        commit = subprocess.run(["git", "rev-parse", "--short=12", "HEAD"], cwd=Path(__file__).parent,
                                capture_output=True, text=True, timeout=10, check=True).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        commit = ""
    return f"{__version__}+g{commit}" if commit else __version__


def provenance(config: RunConfig, **extra) -> dict:
    # out_dir is where the report lands, not how it was produced; leaving it
    # out keeps reruns into a fresh directory byte-identical
    cfg = config.to_dict()
    cfg.pop("out_dir")
    return {"build": build_id(), "seed": config.seed, "config": cfg, **extra}


def write_csv_report(path: Path, header: Sequence[str], rows: Sequence[Sequence], meta: dict) -> None:
    """CSV with ``#``-prefixed provenance lines ahead of the header row."""
    buf = io.StringIO()
    buf.write(f"# build: {meta['build']}\n")
    buf.write(f"# seed: {meta['seed']}\n")
    buf.write("# config: " + json.dumps(meta["config"], sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_csv_report(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# ---------------------------------------------------------------------------
# models and checkpoints


def make_model(config: RunConfig) -> EncoderClassifier:
    return EncoderClassifier(config.encoder, seed=config.seed)


def save_model(path, model: EncoderClassifier, meta: dict | None = None) -> None:
    nc.save_checkpoint(path, model.state_dict(), {"encoder": model.config.to_dict(), **(meta or {})})


def load_model(path) -> EncoderClassifier:
    state, meta = nc.load_checkpoint(path)
    model = EncoderClassifier(EncoderConfig.from_dict(meta["encoder"]), seed=0)
    model.load_state_dict(state)
    return model


def resolve_model(config: RunConfig, checkpoint: str | None, random_init: bool) -> EncoderClassifier:
    if checkpoint:
        return load_model(checkpoint)
    if random_init:
        return make_model(config)
    raise ValueError("a checkpoint or --random-init is required")


# ---------------------------------------------------------------------------
# training


def evaluate(model: EncoderClassifier, ds: TextDataset, split: str, clip_len: int,
             batch_size: int = 256) -> float:
    batches = make_batches(ds, batch_size, clip_len, split=split, shuffle=False)
    correct = total = 0
    for b in batches:
        correct += int((model.predict(b.ids) == b.labels).sum())
        total += b.labels.size
    return correct / total if total else float("nan")


def train_model(model: EncoderClassifier, ds: TextDataset, config: RunConfig,
                train_split: str = "train") -> dict:
    """Adam on cross-entropy; keeps the parameters of the best-validation epoch."""
    params = model.parameters()
    opt = nc.Adam(params, lr=config.lr, betas=(config.beta1, config.beta2), eps=config.adam_eps)
    clip = config.effective_clip_len
    has_valid = ds.indices("valid").size > 0
    has_test = ds.indices("test").size > 0
    history = []
    best = {"epoch": -1, "valid_acc": -1.0}
    best_state = model.state_dict()
    for epoch in range(config.epochs):
        losses = []
        for batch in make_batches(ds, config.batch_size, clip, seed=config.seed, split=train_split, epoch=epoch):
            loss = nc.cross_entropy_loss(model.classify(batch.ids), batch.labels)
            nc.backward(loss)
            opt.step()
            losses.append(float(loss.value))
        row = {"epoch": epoch + 1, "loss": float(np.mean(losses)),
               "train_acc": evaluate(model, ds, train_split, clip)}
        if has_valid:
            row["valid_acc"] = evaluate(model, ds, "valid", clip)
        if has_test:
            row["test_acc"] = evaluate(model, ds, "test", clip)
        history.append(row)
        log.info("epoch %d loss %.4f train %.4f valid %s", row["epoch"], row["loss"], row["train_acc"],
                 row.get("valid_acc"))
        score = row.get("valid_acc", row["train_acc"])
        if score > best["valid_acc"]:
            best = {"epoch": row["epoch"], "valid_acc": score}
            best_state = model.state_dict()
    model.load_state_dict(best_state)
    best_row = history[best["epoch"] - 1] if history else {}
    return {
        "history": history,
        "best_epoch": best["epoch"],
        "best_valid_acc": best_row.get("valid_acc"),
        "test_acc_at_best_valid": best_row.get("test_acc"),
        "final_train_acc": history[-1]["train_acc"] if history else None,
        "majority_rate_train": ds.majority_rate(train_split),
        "majority_rate_test": ds.majority_rate("test") if has_test else None,
    }


def cmd_train(config: RunConfig) -> dict:
    """Train on the manifest dataset; write ``metrics.json`` and ``checkpoint.bin``."""
    if not config.manifest:
        raise ValueError("train needs a dataset manifest")
    ds = load_dataset(config.manifest)
    enc = config.encoder
    if enc.vocab_size != len(ds.vocab) or enc.n_classes != ds.n_classes:
        enc = EncoderConfig.from_dict({**enc.to_dict(), "vocab_size": len(ds.vocab), "n_classes": ds.n_classes})
        config = _with_encoder(config, enc)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = make_model(config)
    metrics = train_model(model, ds, config)
    metrics["dataset"] = {"n_examples": len(ds.labels), "vocab_size": len(ds.vocab),
                          "n_classes": ds.n_classes, "label_names": ds.label_names,
                          "split_sizes": {s: int(ds.indices(s).size) for s in ("train", "valid", "test")}}
    metrics.update(provenance(config))
    save_model(out / "checkpoint.bin", model, {"build": build_id(), "seed": config.seed})
    write_json(out / "metrics.json", metrics)
    return metrics


def _with_encoder(config: RunConfig, enc: EncoderConfig) -> RunConfig:
    d = config.to_dict()
    d["encoder"] = enc.to_dict()
    return RunConfig.from_dict(d)


# ---------------------------------------------------------------------------
# sweeps


def _sequences_for(model: EncoderClassifier, config: RunConfig, d_s: int, n: int,
                   ds: TextDataset | None) -> tuple[np.ndarray, bool]:
    if ds is None:
        return random_sequences(n, d_s, model.config.vocab_size, config.seed), False
    sample = sample_by_length(ds, d_s, n, seed=config.seed)
    return sample.sequences, sample.short


def rank_sweep(model: EncoderClassifier, config: RunConfig, d_s_list: Sequence[int], n_samples: int,
               ds: TextDataset | None = None, head: int = 0) -> list[dict]:
    """Numerical rank and nullity of ``T`` for the chosen head at each length."""
    rows = []
    d_v = model.config.d_v
    for d_s in d_s_list:
        if d_s > model.config.d_s_max:
            raise ValueError(f"d_s={d_s} exceeds d_s_max={model.config.d_s_max}")
        seqs, short = _sequences_for(model, config, d_s, n_samples, ds)
        expected_nullity, _ = nullity_formulas(d_s, d_v)
        row = {"d_s": d_s, "n": len(seqs), "expected_rank": d_s - expected_nullity,
               "expected_nullity": expected_nullity, "status": "short" if short else "ok"}
        if len(seqs) == 0:
            row.update(mean_rank=float("nan"), mean_nullity=float("nan"), min_rank=-1, max_rank=-1, ranks=[])
            rows.append(row)
            continue
        T = model.capture_heads(seqs, heads=[head])[0].T
        ranks = [numerical_rank(T[i], config.rank_eps).numerical_rank for i in range(len(seqs))]
        row.update(mean_rank=float(np.mean(ranks)), mean_nullity=float(d_s - np.mean(ranks)),
                   min_rank=int(min(ranks)), max_rank=int(max(ranks)), ranks=ranks)
        rows.append(row)
    return rows


def cmd_rank_sweep(config: RunConfig, d_s_list: Sequence[int], n_samples: int = 100,
                   checkpoint: str | None = None, random_init: bool = False) -> list[dict]:
    """Write ``rank_sweep.csv`` with one row per sequence length."""
    model = resolve_model(config, checkpoint, random_init)
    ds = load_dataset(config.manifest) if config.manifest else None
    rows = rank_sweep(model, config, d_s_list, n_samples, ds)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["d_s", "n", "mean_rank", "mean_nullity", "min_rank", "max_rank",
              "expected_rank", "expected_nullity", "status"]
    write_csv_report(out / "rank_sweep.csv", header,
                     [[r["d_s"], r["n"], _fmt(r["mean_rank"]), _fmt(r["mean_nullity"]), r["min_rank"],
                       r["max_rank"], r["expected_rank"], r["expected_nullity"], r["status"]] for r in rows],
                     provenance(config, checkpoint=checkpoint, random_init=random_init, n_samples=n_samples))
    return rows


def _tracked(samples, flags: list | None, ranks: list):
    """Pass samples through while recording per-sample flags and logit ranks."""
    for r in samples:
        if flags is not None:
            rep = r.report
            flags.append([int(rep.p1_nonneg), int(rep.p2_nullspace), int(rep.p3_rowsum), int(bool(rep.p4_rank))])
        ranks.append(r.reconstructed_rank)
        yield r


def atilde_sweep(model: EncoderClassifier, config: RunConfig, d_s_values: Sequence[int], n_atilde: int,
                 ds: TextDataset | None = None, head: int = 0, keep_flags: bool = True) -> list[dict]:
    """Softmax-case construction and logit-rank statistics at each length."""
    enc = model.config
    rows = []
    for d_s in d_s_values:
        null_t, null_t1 = nullity_formulas(d_s, enc.d_v)
        row = {"d_s": d_s, "d_k": enc.d_k, "expected_nullity_T": null_t, "expected_nullity_T1": null_t1}
        seqs, short = _sequences_for(model, config, d_s, 1, ds)
        if len(seqs) == 0:
            row.update(status="short", n=0)
            rows.append(row)
            continue
        cap = model.capture_heads(seqs, heads=[head])[0].sample(0)
        rank_t = numerical_rank(cap.T, config.rank_eps)
        rank_t1 = numerical_rank(augment_ones(cap.T), config.rank_eps)
        row.update(measured_rank_T=rank_t.numerical_rank, nullity_T=rank_t.nullity, nullity_T1=rank_t1.nullity)
        if rank_t1.nullity == 0:
            row.update(status="identifiable", n=0)
            rows.append(row)
            continue
        flags: list[list[int]] = []
        ranks: list[int] = []
        samples = iter_atilde_softmax(cap.A, cap.T, n_atilde, seed=[config.seed, d_s], d_k=enc.d_k,
                                      eps=config.rank_eps)
        summary = summarize_softmax_samples(_tracked(samples, flags if keep_flags else None, ranks))
        row.update(status="short" if short else "ok", **summary)
        row["ranks_A_l"] = ranks
        if keep_flags:
            row["flags"] = flags
        rows.append(row)
    return rows


def cmd_atilde_sweep(config: RunConfig, d_s_values: Sequence[int], n_atilde: int = 1000,
                     checkpoint: str | None = None, random_init: bool = False) -> list[dict]:
    """Write ``atilde_sweep.csv``, ``analysis.csv`` and ``analysis.json``."""
    model = resolve_model(config, checkpoint, random_init)
    ds = load_dataset(config.manifest) if config.manifest else None
    rows = atilde_sweep(model, config, d_s_values, n_atilde, ds)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = provenance(config, checkpoint=checkpoint, random_init=random_init, n_atilde=n_atilde)

    def num(r, key, fmt=_fmt):
        return fmt(r[key]) if key in r else ""

    write_csv_report(
        out / "atilde_sweep.csv",
        ["d_s", "n", "mean_rank_A_l", "d_k", "p4_pass_rate", "p1_pass_rate", "p2_pass_rate", "p3_pass_rate",
         "status"],
        [[r["d_s"], r["n"], num(r, "mean_rank_A_l"), r["d_k"], num(r, "p4_pass_rate"), num(r, "p1_pass_rate"),
          num(r, "p2_pass_rate"), num(r, "p3_pass_rate"), r["status"]] for r in rows],
        meta)
    write_csv_report(
        out / "analysis.csv",
        ["d_s", "measured_rank_T", "nullity_T", "nullity_T1", "mean_rank_A_l", "d_k"],
        [[r["d_s"], r.get("measured_rank_T", ""), r.get("nullity_T", ""), r.get("nullity_T1", ""),
          num(r, "mean_rank_A_l"), r["d_k"]] for r in rows],
        meta)
    write_json(out / "analysis.json", {**meta, "flag_order": ["p1", "p2", "p3", "p4"], "sweep": rows})
    return rows


# ---------------------------------------------------------------------------
# matrix utilities


def cmd_check(attention_path, atilde_path, transform_path, d_k: int | None,
              eps: float = SINGLE_EPS) -> dict:
    """Constraint report for dumped ``A``, ``Atilde`` and ``T`` CSV matrices."""
    report = check_constraints(read_matrix_csv(attention_path), read_matrix_csv(atilde_path),
                               read_matrix_csv(transform_path), d_k, eps)
    return asdict(report)


def cmd_dump_captures(config: RunConfig, d_s: int, checkpoint: str | None = None,
                      random_init: bool = False, example: int = 0) -> Path:
    """Write ``captures/head{i}_{Q|K|V|Alogits|A|T|H}.csv`` for one input."""
    model = resolve_model(config, checkpoint, random_init)
    if config.manifest:
        ds = load_dataset(config.manifest)
        sample = sample_by_length(ds, d_s, example + 1, seed=config.seed)
        if len(sample) <= example:
            raise ValueError(f"no example with >= {d_s} tokens at position {example}")
        ids = sample.sequences[example:example + 1]
    else:
        ids = random_sequences(example + 1, d_s, model.config.vocab_size, config.seed)[example:example + 1]
    out = Path(config.out_dir) / "captures"
    out.mkdir(parents=True, exist_ok=True)
    for i, cap in enumerate(model.capture_heads(ids)):
        for name, mat in cap.sample(0).items():
            write_matrix_csv(out / f"head{i}_{name}.csv", mat)
    write_json(out / "tokens.json", {"ids": ids[0].tolist(), **provenance(config, checkpoint=checkpoint)})
    return out
