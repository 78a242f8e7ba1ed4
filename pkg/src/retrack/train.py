"""Training loop: AdamW from scratch, deterministic batching, checkpoints,
metrics logging, ablation comparisons, and model-level gradient checks.

Everything that draws randomness goes through the documented seed streams,
so two runs with the same config and seed produce bit-identical metrics
files, reports, and checkpoints — and resuming from a checkpoint replays
exactly the steps a fresh run would have taken.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import fastpath, seeding
from .autodiff import NonFiniteError, Tensor
from .config import RunConfig, variant_config
from .evaluate import RecallReport, evaluate_model, write_report
from .evidence import belief_and_reliability, channel_evidence, loss_evi
from .geometry import contrastive_loss, similarity
from .model import SampleForward, forward_sample, init_params

__all__ = [
    "DivergenceError",
    "AdamW",
    "loss_bundle",
    "total_loss",
    "TrainResult",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "ablate",
    "sweep",
    "gradcheck_model",
]

CKPT_MAGIC = b"RTRKP"
CKPT_VERSION = 1

METRICS_HEADER = "step,L_total,L_dis,L_dir,L_evi,val_R1,val_R5,val_R10"


class DivergenceError(ArithmeticError):
    """Training produced a non-finite value; carries the offending term."""

    def __init__(self, term: str, step: int | None = None):
        self.term = term
        self.step = step
        at = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite value in {term}{at}")


class AdamW:
    """Decoupled-weight-decay Adam with bias correction.

    Update per tensor: ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``
    with ``m_hat = m / (1 - beta1^t)`` and ``v_hat = v / (1 - beta2^t)``.
    """

    def __init__(self, names, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: None for n in names}
        self.v = {n: None for n in names}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in params:
            p = params[name]
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name] = m
            self.v[name] = v
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps) + self.weight_decay * p.data
            p.data = p.data - self.lr * update


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale the whole gradient set so its global L2 norm is at most ``max_norm``.

    The norm is taken over every entry of every tensor jointly, so relative
    directions between parameters are preserved.  Gradients already within the
    bound pass through untouched.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total_sq = sum(float(np.sum(g * g)) for g in grads.values())
    total = math.sqrt(total_sq)
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return {name: g * scale for name, g in grads.items()}


def loss_bundle(
    params: dict[str, Tensor],
    f_r: np.ndarray,
    f_m: np.ndarray,
    f_t: np.ndarray,
    cfg: RunConfig,
    diag: dict | None = None,
) -> tuple[dict[str, Tensor], list[SampleForward]]:
    """All loss terms as tape tensors sharing one forward pass.

    Returns ``{"L_dis", "L_dir", "L_evi", "L_total"}`` — ablated or
    zero-weighted terms appear as constant 0 tensors and their
    sub-networks are never evaluated.
    """
    b = f_r.shape[0]
    try:
        samples = [forward_sample(params, f_r[i], f_m[i], f_t[i], cfg) for i in range(b)]
    except NonFiniteError as e:
        raise DivergenceError("model forward") from e

    dis_on = not cfg.wo_ldis
    dir_on = (not cfg.wo_ldir) and cfg.kappa != 0.0
    evi_on = (not cfg.wo_levi) and cfg.lam != 0.0

    l_dis: Tensor | None = None
    l_dir: Tensor | None = None
    l_evi: Tensor | None = None
    diag_sims: list[Tensor] | None = None

    if dis_on:
        try:
            l_dis, sims = contrastive_loss([s.f_c for s in samples], [s.f_t for s in samples], cfg, diag)
            diag_sims = [sims[i][i] for i in range(b)]
        except NonFiniteError as e:
            raise DivergenceError("L_dis") from e
    if dir_on:
        try:
            l_dir, _ = contrastive_loss([s.a_c for s in samples], [s.a_t for s in samples], cfg, diag)
        except NonFiniteError as e:
            raise DivergenceError("L_dir") from e
    if evi_on:
        try:
            if diag_sims is None:
                diag_sims = [similarity(s.f_c, s.f_t, cfg, diag) for s in samples]
            rel_r: list[Tensor | None] = [None] * b
            rel_m: list[Tensor | None] = [None] * b
            for i, s in enumerate(samples):
                if not cfg.wo_evi_ref:
                    rel_r[i] = belief_and_reliability(channel_evidence(s.a_r, s.f_t, cfg, diag))[2]
                if not cfg.wo_evi_mod:
                    rel_m[i] = belief_and_reliability(channel_evidence(s.a_m, s.f_t, cfg, diag))[2]
            l_evi = loss_evi(rel_r, rel_m, diag_sims, cfg)
        except NonFiniteError as e:
            raise DivergenceError("L_evi") from e

    zero = ad.scalar(0.0)
    total: Tensor | None = None
    if l_dis is not None:
        total = l_dis
    if l_dir is not None:
        scaled = ad.scale(l_dir, cfg.kappa)
        total = scaled if total is None else ad.add(total, scaled)
    if l_evi is not None:
        scaled = ad.scale(l_evi, cfg.lam)
        total = scaled if total is None else ad.add(total, scaled)
    bundle = {
        "L_dis": l_dis if l_dis is not None else zero,
        "L_dir": l_dir if l_dir is not None else zero,
        "L_evi": l_evi if l_evi is not None else zero,
        "L_total": total if total is not None else zero,
    }
    return bundle, samples


def total_loss(
    params: dict[str, Tensor],
    f_r: np.ndarray,
    f_m: np.ndarray,
    f_t: np.ndarray,
    cfg: RunConfig,
    diag: dict | None = None,
) -> tuple[Tensor, dict[str, float], list[SampleForward]]:
    """The weighted objective plus its per-term breakdown (raw values)."""
    bundle, samples = loss_bundle(params, f_r, f_m, f_t, cfg, diag)
    terms = {name: bundle[name].item() for name in ("L_dis", "L_dir", "L_evi")}
    return bundle["L_total"], terms, samples


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    ckpt_dir: str | Path,
    params: dict[str, Tensor],
    opt: AdamW,
    step: int,
    cfg: RunConfig,
    loss_digest: str,
) -> Path:
    """Write ckpt.json + params.bin (model tensors and optimizer moments)."""
    out = Path(ckpt_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries: list[tuple[str, np.ndarray]] = []
    for name in sorted(params):
        entries.append((name, params[name].data))
    for name in sorted(params):
        m = opt.m[name]
        v = opt.v[name]
        entries.append((f"adam.m/{name}", m if m is not None else np.zeros_like(params[name].data)))
        entries.append((f"adam.v/{name}", v if v is not None else np.zeros_like(params[name].data)))

    header = bytearray()
    header += CKPT_MAGIC
    header += struct.pack("<I", CKPT_VERSION)
    header += struct.pack("<I", len(entries))
    payload = bytearray()
    for name, arr in entries:
        encoded = name.encode("utf-8")
        header += struct.pack("<I", len(encoded))
        header += encoded
        header += struct.pack("<II", arr.shape[0], arr.shape[1])
        payload += arr.astype("<f8").tobytes(order="C")
    crc = zlib.crc32(bytes(payload)) & 0xFFFFFFFF
    with open(out / "params.bin", "wb") as fh:
        fh.write(bytes(header))
        fh.write(bytes(payload))
        fh.write(struct.pack("<I", crc))
    meta = {
        "format_version": CKPT_VERSION,
        "step": step,
        "adam_t": opt.t,
        "names": [name for name, _ in entries],
        "shapes": {name: list(arr.shape) for name, arr in entries},
        "config": cfg.to_dict(),
        "loss_digest": loss_digest,
        "payload_crc32": crc,
    }
    (out / "ckpt.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_checkpoint(ckpt_dir: str | Path) -> tuple[dict[str, Tensor], AdamW, int, RunConfig, str]:
    """Read a checkpoint back; verifies magic, version, shapes, and CRC."""
    root = Path(ckpt_dir)
    meta_path = root / "ckpt.json"
    bin_path = root / "params.bin"
    if not meta_path.exists() or not bin_path.exists():
        raise FileNotFoundError(f"checkpoint at {root} is missing ckpt.json or params.bin")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != CKPT_VERSION:
        raise data_mod.DataFormatError(f"unsupported checkpoint version {meta.get('format_version')}")
    raw = bin_path.read_bytes()
    if raw[:5] != CKPT_MAGIC:
        raise data_mod.DataFormatError(f"bad magic in {bin_path}: {raw[:5]!r}")
    off = 5
    (version,) = struct.unpack_from("<I", raw, off); off += 4
    if version != CKPT_VERSION:
        raise data_mod.DataFormatError(f"unsupported checkpoint binary version {version}")
    (count,) = struct.unpack_from("<I", raw, off); off += 4
    names: list[str] = []
    shapes: list[tuple[int, int]] = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off); off += 4
        names.append(raw[off : off + nlen].decode("utf-8")); off += nlen
        r, c = struct.unpack_from("<II", raw, off); off += 8
        shapes.append((r, c))
    payload_len = sum(r * c * 8 for r, c in shapes)
    payload = raw[off : off + payload_len]
    (crc,) = struct.unpack_from("<I", raw, off + payload_len)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise data_mod.DataFormatError(f"CRC mismatch in {bin_path}")

    tensors: dict[str, np.ndarray] = {}
    pos = 0
    for name, (r, c) in zip(names, shapes):
        n = r * c * 8
        tensors[name] = np.frombuffer(payload[pos : pos + n], dtype="<f8").reshape(r, c).copy()
        pos += n
    cfg = RunConfig.from_dict(meta["config"])
    params = {n: Tensor(t) for n, t in tensors.items() if not n.startswith("adam.")}
    opt = AdamW(sorted(params), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    opt.t = meta["adam_t"]
    for name in params:
        opt.m[name] = tensors[f"adam.m/{name}"]
        opt.v[name] = tensors[f"adam.v/{name}"]
    return params, opt, meta["step"], cfg, meta["loss_digest"]


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    out_dir: Path
    metrics_path: Path
    ckpt_final: Path
    ckpt_best: Path | None
    report: RecallReport
    best_val_r1: float
    steps_run: int
    params: dict[str, Tensor]
    diagnostics: dict = field(default_factory=dict)


def _fmt(x: float) -> str:
    return repr(float(x))


def train(
    cfg: RunConfig,
    ds: data_mod.SynthDataset | None = None,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    on_step=None,
    log_every: int = 0,
) -> TrainResult:
    """Run the configured training; returns paths and the final test report.

    ``ds`` may be passed to share a generated dataset across runs (its
    config must match); otherwise the dataset comes from ``cfg.data_dir``
    when set, else it is generated from ``cfg``.  Likewise ``out_dir``
    falls back to ``cfg.out_dir``, then to ``run_out``.
    ``on_step(step, terms, samples)`` is invoked after each step's loss is
    computed — tests use it to watch invariants mid-run.
    """
    cfg = cfg.validate()
    if ds is None and cfg.data_dir:
        ds = data_mod.load(cfg.data_dir)
    if ds is None:
        ds = data_mod.generate(cfg)
    elif ds.config != data_mod.data_config(cfg):
        raise ValueError("provided dataset was generated under a different data config")
    if out_dir is None:
        out_dir = cfg.out_dir if cfg.out_dir else "run_out"
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        params, opt, start_step, _, _ = load_checkpoint(resume_from)
    else:
        params = init_params(cfg, cfg.seed)
        opt = AdamW(sorted(params), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                    eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
        start_step = 0

    train_split = ds.splits["train"]
    f_r_all = train_split.f_r.astype(np.float64)
    f_m_all = train_split.f_m.astype(np.float64)
    f_t_all = train_split.f_t.astype(np.float64)

    metrics_path = out / "metrics.csv"
    digest = hashlib.sha256()
    diag: dict = {}
    best_r1 = -1.0
    ckpt_best: Path | None = None

    def run_val() -> RecallReport:
        params_np = {k: t.data for k, t in params.items()}
        return evaluate_model(params_np, ds, cfg, split="val")

    with open(metrics_path, "w", newline="") as fh:
        fh.write(METRICS_HEADER + "\n")
        digest.update((METRICS_HEADER + "\n").encode())
        for step in range(start_step + 1, cfg.steps + 1):
            idx = data_mod.batch_indices(cfg.seed, train_split.count, cfg.batch, step)
            try:
                loss, terms, samples = total_loss(
                    params, f_r_all[idx], f_m_all[idx], f_t_all[idx], cfg, diag
                )
            except DivergenceError as e:
                raise DivergenceError(e.term, step) from e
            total_val = loss.item()
            if not math.isfinite(total_val):
                raise DivergenceError("L_total", step)
            g = ad.grads(loss, params)
            if cfg.clip_norm > 0.0:
                g = clip_global_norm(g, cfg.clip_norm)
            if on_step is not None:
                on_step(step, terms, samples)
            opt.step(params, g)

            val_cells = ["", "", ""]
            if step % cfg.val_every == 0 or step == cfg.steps:
                report = run_val()
                r1 = report.recall_at_k[1]
                val_cells = [_fmt(r1), _fmt(report.recall_at_k[5]), _fmt(report.recall_at_k[10])]
                if r1 > best_r1:
                    best_r1 = r1
                    ckpt_best = save_checkpoint(
                        out / "ckpt-best", params, opt, step, cfg, digest.hexdigest()
                    )
            row = ",".join(
                [str(step), _fmt(total_val), _fmt(terms["L_dis"]), _fmt(terms["L_dir"]),
                 _fmt(terms["L_evi"])] + val_cells
            )
            fh.write(row + "\n")
            digest.update((row + "\n").encode())
            if log_every and step % log_every == 0:
                print(f"step {step}: L_total={total_val:.4f} " +
                      " ".join(f"{k}={v:.4f}" for k, v in terms.items()))

    ckpt_final = save_checkpoint(out / "ckpt-final", params, opt, cfg.steps, cfg, digest.hexdigest())
    params_np = {k: t.data for k, t in params.items()}
    report = evaluate_model(params_np, ds, cfg, split="test")
    write_report(report, out / "recall.json")
    return TrainResult(
        out_dir=out,
        metrics_path=metrics_path,
        ckpt_final=ckpt_final,
        ckpt_best=ckpt_best,
        report=report,
        best_val_r1=best_r1,
        steps_run=cfg.steps - start_step,
        params=params,
        diagnostics=dict(diag),
    )


# ---------------------------------------------------------------------------
# ablations, sweeps, gradient checks


def ablate(
    base_cfg: RunConfig,
    variants: list[str],
    seeds: list[int],
    out_dir: str | Path | None = None,
    steps: int | None = None,
) -> dict:
    """Train each variant on each seed (shared dataset per seed).

    Returns a report mapping variant → per-seed and mean Recall@{1,5,10},
    plus the content hash of each seed's shared dataset so a reader can
    confirm every variant saw identical bytes.  ``steps`` overrides the
    base config's step count for quick scans.
    """
    labels = list(variants)
    if "full" not in labels:
        labels.insert(0, "full")
    report: dict = {"seeds": list(seeds), "dataset_hash": {}, "variants": {}}
    for label in labels:
        report["variants"][label] = {"per_seed": {}, "mean": {}}
    with tempfile.TemporaryDirectory(prefix="ablate-") as scratch:
        root = Path(out_dir) if out_dir is not None else Path(scratch)
        for seed in seeds:
            seed_cfg = base_cfg.replace(seed=seed, **({"steps": steps} if steps else {}))
            ds = data_mod.generate(seed_cfg)
            report["dataset_hash"][str(seed)] = data_mod.dataset_sha256(ds)
            for label in labels:
                cfg_v = variant_config(seed_cfg, label)
                result = train(cfg_v, ds=ds, out_dir=root / f"{label}-seed{seed}")
                rec = result.report.recall_at_k
                report["variants"][label]["per_seed"][str(seed)] = {
                    "R1": rec[1], "R5": rec[5], "R10": rec[10],
                }
    for label in labels:
        per_seed = report["variants"][label]["per_seed"]
        for key in ("R1", "R5", "R10"):
            report["variants"][label]["mean"][key] = float(
                np.mean([per_seed[str(s)][key] for s in seeds])
            )
    return report


def ablate_table(report: dict) -> str:
    lines = [f"{'variant':<12} {'R@1':>8} {'R@5':>8} {'R@10':>8}"]
    for label, entry in report["variants"].items():
        m = entry["mean"]
        lines.append(f"{label:<12} {m['R1']:>8.4f} {m['R5']:>8.4f} {m['R10']:>8.4f}")
    return "\n".join(lines)


def sweep(
    base_cfg: RunConfig,
    kappas: list[float] | None = None,
    lams: list[float] | None = None,
    steps: int | None = None,
    out_dir: str | Path | None = None,
) -> dict:
    """Grid scan over the loss weights; one training run per grid point."""
    kappas = kappas if kappas is not None else [base_cfg.kappa]
    lams = lams if lams is not None else [base_cfg.lam]
    rows = []
    ds = data_mod.generate(base_cfg)
    with tempfile.TemporaryDirectory(prefix="sweep-") as scratch:
        root = Path(out_dir) if out_dir is not None else Path(scratch)
        for kappa in kappas:
            for lam in lams:
                # kappa/lam/steps are not data-generation fields, so one
                # dataset serves the whole grid
                cfg = base_cfg.replace(kappa=kappa, lam=lam, **({"steps": steps} if steps else {}))
                result = train(cfg, ds=ds, out_dir=root / f"kappa{kappa}-lam{lam}")
                rec = result.report.recall_at_k
                rows.append({"kappa": kappa, "lam": lam,
                             "R1": rec[1], "R5": rec[5], "R10": rec[10]})
    return {"rows": rows}


def gradcheck_model(cfg: RunConfig, seed: int, h: float = 1e-5, batch: int = 2) -> dict[str, float]:
    """Per-loss max relative gradient error on a synthetic batch.

    Parameters use the fully random init (a zero final layer would make
    its feeder weights' gradients vanish identically); the ±h evaluations
    run on the vectorized tape-free route, so the finite-difference side
    is an independent implementation of the same math.
    """
    params = init_params(cfg, seed, random_final=True)
    g = seeding.rng(seed, seeding.GRADCHECK)
    f_r = g.standard_normal((batch, cfg.q, cfg.d))
    f_m = g.standard_normal((batch, cfg.q, cfg.d))
    f_t = g.standard_normal((batch, cfg.q, cfg.d))

    def f_tape() -> dict[str, Tensor]:
        bundle, _ = loss_bundle(params, f_r, f_m, f_t, cfg)
        return bundle

    params_np = {k: t.data for k, t in params.items()}

    def f_fast() -> dict[str, float]:
        return fastpath.losses_np(params_np, f_r, f_m, f_t, cfg)

    return ad.gradcheck_multi(f_tape, params, h=h, f_fast=f_fast)
