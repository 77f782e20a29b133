"""Training loop, evaluation, ablation runner, and sequence enhancement.

Training walks each sequence in temporal order as disjoint consecutive frame
pairs: both frames of a pair are forwarded with the recurrent state connected
inside the pair (a two-frame backpropagation window matching the pairwise
temporal loss), and the state is detached between optimization steps. The
first frame of a sequence never contributes a temporal term.

Setting the environment variable ``EVLIGHT_DETERMINISTIC=1`` forces seeded,
single-threaded, bit-reproducible runs.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .events import EventStream, build_voxel_grid
from .network import (EnhanceNet, ModelConfig, build_model, canonical_json,
                      load_checkpoint, load_model, model_arrays,
                      save_checkpoint)
from .objectives import (LossConfig, MetricReport, build_phi,
                         reconstruction_loss, temporal_loss, total_loss)
from .synth import (Manifest, load_external_sequence, load_sample,
                    save_gray16, save_image)

DETERMINISM_ENV = "EVLIGHT_DETERMINISTIC"

ABLATION_VARIANTS = ("no_events", "no_irfs", "no_erfs", "no_selection",
                     "no_gru", "no_temporal_loss", "ones_mask")


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite; carries the last good checkpoint."""

    def __init__(self, last_checkpoint):
        self.last_checkpoint = last_checkpoint
        where = last_checkpoint or "no checkpoint written yet"
        super().__init__(f"non-finite training loss; last good checkpoint: {where}")


def deterministic_mode() -> bool:
    return os.environ.get(DETERMINISM_ENV, "") == "1"


def setup_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


@dataclass
class TrainConfig:
    """Everything a training run needs; JSON round-trippable."""

    manifest: str = ""
    out_dir: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    batch_size: int = 2
    epochs: int = 2
    crop: int = 64
    flip: bool = True
    rotate: bool = True
    seed: int = 0
    save_every: int = 1

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr, batch_size, and epochs must be positive")
        if self.crop < 8 or self.crop % 4:
            raise ValueError("crop must be >= 8 and divisible by 4")
        if self.save_every < 1:
            raise ValueError("save_every must be positive")
        self.betas = tuple(float(b) for b in self.betas)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        d["loss"] = self.loss.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d.get("model", {}))
        d["loss"] = LossConfig.from_dict(d.get("loss", {}))
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class TrainResult:
    final_checkpoint: Path
    checkpoints: list
    curve: list  # (global_step, epoch, loss) tuples
    out_dir: Path


# ----------------------------------------------------------------------
# data preparation and augmentation
# ----------------------------------------------------------------------
def build_frame_grids(events: EventStream | None, timestamps, bins: int,
                      height: int, width: int) -> np.ndarray:
    """Per-frame voxel grids over the window since the previous frame.

    Frame 0 has no preceding window and gets a zero grid. Events landing
    exactly on a frame timestamp fall into both adjacent windows.
    """
    timestamps = np.asarray(timestamps, dtype=np.int64)
    n = timestamps.shape[0]
    grids = np.zeros((n, bins, height, width), dtype=np.float32)
    if events is None or len(events) == 0:
        return grids
    for i in range(1, n):
        t0, t1 = int(timestamps[i - 1]), int(timestamps[i])
        if t1 > t0:
            grids[i] = build_voxel_grid(events, t0, t1, bins).data.astype(np.float32)
    return grids


@dataclass
class SequenceTensors:
    sample_id: str
    low: np.ndarray    # (T, 3, H, W) float32
    gt: np.ndarray     # (T, 3, H, W) float32
    grids: np.ndarray  # (T, bins, H, W) float32


def prepare_sequence(manifest: Manifest, sample, bins: int) -> SequenceTensors:
    data = load_sample(manifest, sample)
    grids = build_frame_grids(data.events, data.timestamps, bins,
                              sample.height, sample.width)
    return SequenceTensors(
        sample.sample_id,
        np.ascontiguousarray(data.low.transpose(0, 3, 1, 2)),
        np.ascontiguousarray(data.normal.transpose(0, 3, 1, 2)),
        grids,
    )


def apply_spatial(arr: np.ndarray, rot_k: int, flip: bool) -> np.ndarray:
    """Rotate by 90deg steps and/or flip the last two (H, W) axes."""
    if flip:
        arr = np.flip(arr, axis=-1)
    if rot_k:
        arr = np.rot90(arr, k=rot_k, axes=(-2, -1))
    return np.ascontiguousarray(arr)


@dataclass
class Augmentation:
    y0: int
    x0: int
    size: int
    rot_k: int
    flip: bool

    def __call__(self, arr: np.ndarray) -> np.ndarray:
        crop = arr[..., self.y0:self.y0 + self.size, self.x0:self.x0 + self.size]
        return apply_spatial(crop, self.rot_k, self.flip)


def sample_augmentation(rng: np.random.Generator, height: int, width: int,
                        cfg: TrainConfig) -> Augmentation:
    if cfg.crop > min(height, width):
        raise ValueError(f"crop {cfg.crop} exceeds sequence resolution "
                         f"{height}x{width}")
    y0 = int(rng.integers(0, height - cfg.crop + 1))
    x0 = int(rng.integers(0, width - cfg.crop + 1))
    rot_k = int(rng.integers(0, 4)) if cfg.rotate else 0
    flip = bool(rng.integers(0, 2)) if cfg.flip else False
    return Augmentation(y0, x0, cfg.crop, rot_k, flip)


def _epoch_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch * 7_919 + 12_345) % (2 ** 63)


# ----------------------------------------------------------------------
# optimizer state <-> checkpoint arrays
# ----------------------------------------------------------------------
def _optimizer_arrays(model: EnhanceNet, opt: torch.optim.Adam) -> dict:
    arrays = {}
    for name, param in model.named_parameters():
        st = opt.state.get(param)
        if st:
            arrays[f"opt.exp_avg.{name}"] = st["exp_avg"].detach().cpu().numpy()
            arrays[f"opt.exp_avg_sq.{name}"] = st["exp_avg_sq"].detach().cpu().numpy()
            arrays[f"opt.step.{name}"] = np.asarray(
                [float(st["step"])], dtype=np.float32)
    return arrays


def _restore_optimizer(model: EnhanceNet, opt: torch.optim.Adam, arrays: dict) -> None:
    for name, param in model.named_parameters():
        key = f"opt.exp_avg.{name}"
        if key in arrays:
            opt.state[param] = {
                "step": torch.tensor(float(arrays[f"opt.step.{name}"][0])),
                "exp_avg": torch.from_numpy(arrays[key].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"opt.exp_avg_sq.{name}"].copy()),
            }


def _save_train_checkpoint(path, cfg: TrainConfig, model: EnhanceNet,
                           opt: torch.optim.Adam, epoch: int, global_step: int) -> Path:
    arrays = model_arrays(model)
    arrays.update(_optimizer_arrays(model, opt))
    save_checkpoint(path, cfg.model, arrays,
                    meta={"epoch": epoch, "global_step": global_step,
                          "train_config": cfg.to_dict()})
    return Path(path)


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------
def train(cfg: TrainConfig, resume=None) -> TrainResult:
    """Run Adam training over the manifest's train split; checkpoint per epoch."""
    if deterministic_mode():
        setup_determinism(cfg.seed)

    manifest = Manifest.load(cfg.manifest)
    train_samples = manifest.split("train")
    if not train_samples:
        raise ValueError("manifest has no train split")
    sequences = [prepare_sequence(manifest, s, cfg.model.voxel_bins)
                 for s in train_samples]

    model = build_model(cfg.model)
    model.train()
    phi = build_phi(cfg.loss)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)

    start_epoch = 0
    global_step = 0
    last_ckpt = None
    if resume is not None:
        ck_cfg, arrays, meta = load_checkpoint(resume)
        if canonical_json(ck_cfg.to_dict()) != canonical_json(cfg.model.to_dict()):
            raise ValueError("checkpoint model config differs from train config")
        params = {k: torch.from_numpy(v.copy())
                  for k, v in arrays.items() if not k.startswith("opt.")}
        model.load_state_dict(params)
        _restore_optimizer(model, opt, arrays)
        start_epoch = int(meta["epoch"])
        global_step = int(meta["global_step"])
        last_ckpt = Path(resume)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curve_path = out_dir / "losses.csv"
    curve_fh = open(curve_path, "a", encoding="utf-8")
    if curve_fh.tell() == 0:
        curve_fh.write("step,epoch,loss\n")

    curve = []
    checkpoints = []

    def run_step(loss):
        nonlocal global_step
        if not torch.isfinite(loss):
            raise TrainingDiverged(last_ckpt)
        opt.zero_grad()
        loss.backward()
        opt.step()
        global_step += 1
        value = float(loss.detach())
        curve.append((global_step, epoch, value))
        curve_fh.write(f"{global_step},{epoch},{value:.8f}\n")

    try:
        for epoch in range(start_epoch, cfg.epochs):
            rng = np.random.default_rng(_epoch_seed(cfg.seed, epoch))
            order = [int(i) for i in rng.permutation(len(sequences))]
            augmented = []
            for idx in order:
                seq = sequences[idx]
                aug = sample_augmentation(rng, seq.low.shape[-2],
                                          seq.low.shape[-1], cfg)
                augmented.append((seq.low.shape[0], aug(seq.low), aug(seq.gt),
                                  aug(seq.grids)))

            # lockstep batches require equal frame counts
            by_length: dict = {}
            for item in augmented:
                by_length.setdefault(item[0], []).append(item)

            for length in sorted(by_length):
                group = by_length[length]
                for pos in range(0, len(group), cfg.batch_size):
                    chunk = group[pos:pos + cfg.batch_size]
                    low = torch.from_numpy(np.stack([c[1] for c in chunk], axis=1))
                    gt = torch.from_numpy(np.stack([c[2] for c in chunk], axis=1))
                    grids = torch.from_numpy(np.stack([c[3] for c in chunk], axis=1))

                    state = None
                    for a in range(0, length - 1, 2):
                        en_a, state, _ = model(low[a], grids[a], state)
                        en_b, state, _ = model(low[a + 1], grids[a + 1], state)
                        rec = 0.5 * (reconstruction_loss(en_a, gt[a], cfg.loss, phi)
                                     + reconstruction_loss(en_b, gt[a + 1],
                                                           cfg.loss, phi))
                        temp = temporal_loss(en_b, en_a, gt[a + 1], gt[a])
                        run_step(total_loss(rec, temp, cfg.loss))
                        if state is not None:
                            state = state.detached()
                    if length % 2:
                        en, state, _ = model(low[-1], grids[-1], state)
                        run_step(reconstruction_loss(en, gt[-1], cfg.loss, phi))

            curve_fh.flush()
            if (epoch + 1) % cfg.save_every == 0 or epoch + 1 == cfg.epochs:
                path = out_dir / f"ckpt_epoch_{epoch + 1:03d}.evck"
                last_ckpt = _save_train_checkpoint(path, cfg, model, opt,
                                                   epoch + 1, global_step)
                checkpoints.append(last_ckpt)
    finally:
        curve_fh.close()
    return TrainResult(last_ckpt, checkpoints, curve, out_dir)


# ----------------------------------------------------------------------
# inference helpers
# ----------------------------------------------------------------------
def padded_forward(model: EnhanceNet, img: torch.Tensor, grid: torch.Tensor,
                   state):
    """Reflect-pad to a multiple of 4, run the model, crop back."""
    h, w = img.shape[-2:]
    ph, pw = (-h) % 4, (-w) % 4
    if ph or pw:
        if ph >= h or pw >= w:
            raise ValueError(f"cannot reflect-pad a {h}x{w} frame")
        img = F.pad(img, (0, pw, 0, ph), mode="reflect")
        grid = F.pad(grid, (0, pw, 0, ph), mode="reflect")
    out, state, aux = model(img, grid, state)
    out = out[..., :h, :w]
    aux = {k: v[..., :h, :w] for k, v in aux.items()}
    return out, state, aux


def _to_hwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()[0].transpose(1, 2, 0)


def _resolve_model(ckpt) -> EnhanceNet:
    if isinstance(ckpt, EnhanceNet):
        return ckpt
    model, _ = load_model(ckpt)
    return model


def evaluate(ckpt, manifest_path, split: str = "test", out_dir=None) -> dict:
    """Metric sweep of a checkpoint over one manifest split.

    Enhancement runs with carried recurrent state and clamped eval outputs;
    PSNR/PSNR*/SSIM are computed per frame against the normal-light frames.
    Writes per-sequence CSVs and a summary JSON when ``out_dir`` is given.
    """
    if deterministic_mode():
        setup_determinism(0)
    model = _resolve_model(ckpt)
    model.eval()
    manifest = Manifest.load(manifest_path)
    samples = manifest.split(split)
    if not samples:
        raise ValueError(f"manifest has no '{split}' split")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    per_sequence = {}
    with torch.no_grad():
        for sample in samples:
            seq = prepare_sequence(manifest, sample, model.cfg.voxel_bins)
            state = None
            enhanced = []
            for t in range(seq.low.shape[0]):
                img = torch.from_numpy(seq.low[t:t + 1])
                grid = torch.from_numpy(seq.grids[t:t + 1])
                out, state, _ = padded_forward(model, img, grid, state)
                enhanced.append(_to_hwc(out))
            reference = [seq.gt[t].transpose(1, 2, 0) for t in range(seq.gt.shape[0])]
            report = MetricReport.from_sequences(enhanced, reference,
                                                 metadata={"sample_id": seq.sample_id,
                                                           "split": split})
            per_sequence[seq.sample_id] = report
            if out_dir is not None:
                report.write_csv(out_dir / f"metrics_{seq.sample_id}.csv")

    summary = {
        "split": split,
        "sequences": {sid: rep.summary() for sid, rep in per_sequence.items()},
        "overall": {
            name: float(np.mean([rep.mean(name) for rep in per_sequence.values()]))
            for name in ("psnr", "psnr_star", "ssim")
        },
    }
    if out_dir is not None:
        with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return summary


def _apply_variant(cfg: TrainConfig, variant: str, out_dir) -> TrainConfig:
    d = cfg.to_dict()
    d["out_dir"] = str(out_dir)
    model = d["model"]
    if variant == "full":
        pass
    elif variant == "no_events":
        model["use_events"] = False
    elif variant == "no_irfs":
        model["use_irfs"] = False
    elif variant == "no_erfs":
        model["use_erfs"] = False
    elif variant == "no_selection":
        model["use_selection"] = False
    elif variant == "no_gru":
        model["use_gru"] = False
    elif variant == "no_temporal_loss":
        d["loss"]["lambda_temp"] = 0.0
    elif variant == "ones_mask":
        model["ones_mask"] = True
    else:
        raise ValueError(f"unknown ablation variant {variant!r}; "
                         f"known: {ABLATION_VARIANTS}")
    return TrainConfig.from_dict(d)


def ablate(base_cfg: TrainConfig, variants, out_dir) -> list:
    """Train and evaluate the full model plus each variant with a shared seed."""
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise ValueError(f"unknown ablation variant {v!r}; "
                             f"known: {ABLATION_VARIANTS}")
    out_dir = Path(out_dir)
    rows = []
    for name in ["full", *variants]:
        run_cfg = _apply_variant(base_cfg, name, out_dir / name)
        result = train(run_cfg)
        summary = evaluate(result.final_checkpoint, run_cfg.manifest, "test",
                           out_dir / name / "eval")
        rows.append({"variant": name, **summary["overall"]})

    with open(out_dir / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")
    header = f"{'variant':<18}{'psnr':>10}{'psnr_star':>12}{'ssim':>10}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(f"{row['variant']:<18}{row['psnr']:>10.3f}"
                     f"{row['psnr_star']:>12.3f}{row['ssim']:>10.4f}")
    table = "\n".join(lines)
    (out_dir / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    return rows


def enhance(ckpt, input_dir, out_dir, dump_aux: bool = False) -> list:
    """Enhance a directory of frames; optionally dump SNR/light-up maps.

    Reads frame_*.png plus optional events.evst and timestamps.json; without
    events the model runs on zero voxel grids.
    """
    if deterministic_mode():
        setup_determinism(0)
    model = _resolve_model(ckpt)
    model.eval()
    frames, timestamps, events = load_external_sequence(input_dir)
    n, h, w = frames.shape[:3]
    if events is not None and timestamps is not None:
        grids = build_frame_grids(events, timestamps, model.cfg.voxel_bins, h, w)
    else:
        grids = np.zeros((n, model.cfg.voxel_bins, h, w), dtype=np.float32)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dump_aux:
        (out_dir / "aux").mkdir(exist_ok=True)

    written = []
    state = None
    with torch.no_grad():
        for t in range(n):
            img = torch.from_numpy(frames[t].transpose(2, 0, 1)[None])
            grid = torch.from_numpy(grids[t:t + 1])
            out, state, aux = padded_forward(model, img, grid, state)
            path = out_dir / f"frame_{t:04d}.png"
            save_image(path, _to_hwc(out))
            written.append(path)
            if dump_aux:
                snr = aux["m_snr"].detach().cpu().numpy()[0, 0]
                save_gray16(out_dir / "aux" / f"m_snr_{t:04d}.png", snr)
                i_lu = np.clip(_to_hwc(aux["i_lu"]), 0.0, 1.0)
                save_image(out_dir / "aux" / f"i_lu_{t:04d}.png", i_lu)
    return written
