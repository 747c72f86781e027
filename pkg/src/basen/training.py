"""Objective, synthetic cued-attention data, and the train/eval loops.

The quality measure throughout is scale-invariant SDR: the estimate is
projected onto the reference, and the energy ratio between that projection
and the projection residual is reported in dB.  `si_sdr` is the plain
metric; `si_sdr_loss` is the smoothed differentiable surrogate used for
gradient descent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import diff_ops as ops
from .diff_ops import DiffNode, ScheduleConfig
from .eeg_preprocess import BandSpec, bandpass
from .model import BasenConfig, BasenModel, save_checkpoint
from .signal_core import MultiChannelSeries, SampleBuffer, rms, scale_for_snr


class TrainingError(ValueError):
    pass


SI_SDR_CAP_DB = 60.0
_LOSS_SMOOTHING = 1e-6


def _as_samples(x, what):
    a = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    if a.ndim != 1:
        raise TrainingError(f"{what} must be one-dimensional, got shape {a.shape}")
    return a


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR of estimate against reference, in dB.

    Capped to +/-60 dB so a numerically perfect reconstruction does not
    return infinity.
    """
    est = _as_samples(estimate, "estimate")
    ref = _as_samples(reference, "reference")
    if est.shape != ref.shape:
        raise TrainingError(
            f"length mismatch: estimate {est.size} vs reference {ref.size}")
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        raise TrainingError("reference is silent")
    projection = (float(est @ ref) / ref_energy) * ref
    residual = est - projection
    num = float(projection @ projection)
    den = float(residual @ residual)
    if den == 0.0:
        return SI_SDR_CAP_DB
    if num == 0.0:
        return -SI_SDR_CAP_DB
    value = 10.0 * math.log10(num / den)
    return float(min(max(value, -SI_SDR_CAP_DB), SI_SDR_CAP_DB))


def si_sdr_loss(estimate: DiffNode, reference) -> DiffNode:
    """Differentiable negative-SI-SDR surrogate over a (batch, samples) pair.

    The energy ratio is smoothed with a 1e-6 cross-term so the loss stays
    finite (exactly -60 dB) at perfect reconstruction; intermediate values
    track plain negative SI-SDR closely.
    """
    ref = np.asarray(reference, dtype=estimate.value.dtype)
    if ref.ndim != 2:
        raise TrainingError(f"reference must be (batch, samples), got {ref.shape}")
    if estimate.value.shape != ref.shape:
        raise TrainingError(
            f"shape mismatch: estimate {estimate.value.shape} vs reference {ref.shape}")
    energies = np.sum(ref * ref, axis=-1)
    if np.any(energies == 0.0):
        raise TrainingError("reference is silent")
    ref_c = ops.constant(ref)
    coef = ops.div(ops.sum_axis(ops.mul(estimate, ref_c), -1), ops.constant(energies))
    projection = ops.rowwise_scale(ref_c, coef)
    residual = ops.sub(estimate, projection)
    e_proj = ops.sum_axis(ops.mul(projection, projection), -1)
    e_res = ops.sum_axis(ops.mul(residual, residual), -1)
    num = ops.add_scalar(ops.add(e_res, ops.scale(e_proj, _LOSS_SMOOTHING)), 1e-300)
    den = ops.add_scalar(ops.add(e_proj, ops.scale(e_res, _LOSS_SMOOTHING)), 1e-300)
    per_example = ops.log(ops.div(num, den))
    return ops.scale(ops.mean_all(per_example), 10.0 / math.log(10.0))


# --- synthetic cued-attention task ------------------------------------------

SLOW_MOD_RANGE_HZ = (1.0, 1.8)
FAST_MOD_RANGE_HZ = (2.6, 3.4)
LOW_CARRIER_BAND = (0.075, 0.175)  # fractions of the audio sample rate
HIGH_CARRIER_BAND = (0.25, 0.45)
EEG_GAIN_RANGE = (0.5, 1.5)
_ENV_BASE = 0.55
_ENV_DEPTH = 0.45


@dataclass(frozen=True)
class SyntheticTaskConfig:
    audio_rate: float = 8000.0
    eeg_rate: float = 128.0
    eeg_channels: int = 16
    seconds: float = 2.0
    cue_snr_db: float = 10.0

    def __post_init__(self):
        if self.audio_rate <= 0 or self.eeg_rate <= 0:
            raise TrainingError("sample rates must be positive")
        if self.eeg_channels < 1:
            raise TrainingError(f"eeg_channels must be >= 1, got {self.eeg_channels}")
        if self.seconds <= 0:
            raise TrainingError(f"seconds must be positive, got {self.seconds}")


@dataclass(frozen=True)
class SyntheticExample:
    mixture: SampleBuffer
    eeg: MultiChannelSeries
    target: SampleBuffer
    interferer: SampleBuffer
    attended: int


def _am_noise_source(rng, rate, n, carrier_band, mod_range):
    """Band-limited noise with a slow sinusoidal amplitude envelope."""
    white = rng.normal(size=n)
    band = BandSpec(carrier_band[0] * rate, carrier_band[1] * rate)
    carrier = bandpass(MultiChannelSeries(white[None, :], rate), band).data[0]
    f_mod = rng.uniform(*mod_range)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    t = np.arange(n) / rate
    envelope = _ENV_BASE + _ENV_DEPTH * np.sin(2.0 * np.pi * f_mod * t + phase)
    return carrier * envelope, f_mod, phase


def make_synthetic_example(cfg: SyntheticTaskConfig, rng, attended: int) -> SyntheticExample:
    """One two-speaker mixture plus an EEG that tracks the attended envelope.

    All random draws happen in a fixed order before the attended flag is
    consulted, so the same generator state yields the identical mixture for
    either attended value; the flag only selects which envelope drives the
    EEG cue and which source counts as the target.
    """
    if attended not in (0, 1):
        raise TrainingError(f"attended must be 0 or 1, got {attended}")
    n = int(round(cfg.audio_rate * cfg.seconds))
    frames = int(round(cfg.eeg_rate * cfg.seconds))
    sources, envelopes = [], []
    for band, mod_range in ((LOW_CARRIER_BAND, SLOW_MOD_RANGE_HZ),
                            (HIGH_CARRIER_BAND, FAST_MOD_RANGE_HZ)):
        wave, f_mod, phase = _am_noise_source(rng, cfg.audio_rate, n, band, mod_range)
        sources.append(wave)
        envelopes.append((f_mod, phase))
    gains = rng.uniform(*EEG_GAIN_RANGE, size=cfg.eeg_channels)
    noise = rng.normal(size=(cfg.eeg_channels, frames))

    rate = cfg.audio_rate
    target, interferer = scale_for_snr(SampleBuffer(sources[attended], rate),
                                       SampleBuffer(sources[1 - attended], rate), 0.0)
    mixture = SampleBuffer(target.samples + interferer.samples, rate)

    f_mod, phase = envelopes[attended]
    t = np.arange(frames) / cfg.eeg_rate
    envelope = _ENV_BASE + _ENV_DEPTH * np.sin(2.0 * np.pi * f_mod * t + phase)
    cue = envelope - envelope.mean()
    cue_rms = math.sqrt(float(np.mean(cue * cue)))
    noise_scale = 10.0 ** (-cfg.cue_snr_db / 20.0)
    data = np.empty((cfg.eeg_channels, frames))
    for c in range(cfg.eeg_channels):
        row = noise[c] / math.sqrt(float(np.mean(noise[c] * noise[c])))
        data[c] = gains[c] * (cue + cue_rms * noise_scale * row)
    return SyntheticExample(mixture, MultiChannelSeries(data, cfg.eeg_rate),
                            target, interferer, attended)


def build_dataset(cfg: SyntheticTaskConfig, count: int, seed: int):
    """Independent examples; the attended speaker is drawn per example."""
    if count < 1:
        raise TrainingError(f"count must be >= 1, got {count}")
    out = []
    for child in np.random.SeedSequence(seed).spawn(count):
        rng = np.random.Generator(np.random.Philox(child))
        attended = int(rng.integers(2))
        out.append(make_synthetic_example(cfg, rng, attended))
    return out


def zero_eeg_examples(examples):
    """Copies of the examples with the EEG replaced by silence."""
    return [replace(ex, eeg=MultiChannelSeries(np.zeros_like(ex.eeg.data),
                                               ex.eeg.rate))
            for ex in examples]


# --- training ---------------------------------------------------------------

LOSS_MODES = ("target-only", "both-sources")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 60
    max_lr: float = 2e-4
    warmup_ratio: float = 0.05
    loss_mode: str = "target-only"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if self.loss_mode not in LOSS_MODES:
            raise TrainingError(
                f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")


def _batch_arrays(examples, model, dtype):
    n = len(examples[0].mixture)
    padded = model.padded_length(n)
    audio = np.zeros((len(examples), 1, padded), dtype=dtype)
    for i, ex in enumerate(examples):
        if len(ex.mixture) != n:
            raise TrainingError("examples in a batch must share a length")
        audio[i, 0, :n] = ex.mixture.samples
    eeg = np.stack([ex.eeg.data for ex in examples]).astype(dtype)
    targets = np.stack([ex.target.samples for ex in examples])
    interferers = np.stack([ex.interferer.samples for ex in examples])
    return audio, eeg, targets, interferers, n


def _source_estimates(model, audio, eeg, n):
    outs = model.forward_nodes(audio, eeg)
    return [ops.sum_axis(ops.narrow_frames(out, 0, n), 1) for out in outs]


def _batch_loss(model, batch, loss_mode):
    audio, eeg, targets, interferers, n = batch
    estimates = _source_estimates(model, ops.constant(audio), ops.constant(eeg), n)
    loss = si_sdr_loss(estimates[0], targets)
    if loss_mode == "both-sources":
        loss = ops.scale(ops.add(loss, si_sdr_loss(estimates[1], interferers)), 0.5)
    return loss


def _chunks(seq, size):
    for start in range(0, len(seq), size):
        yield seq[start:start + size]


def mean_si_sdr(model, examples, batch_size=8) -> float:
    """Mean target SI-SDR of the model's first output over the examples."""
    total = 0.0
    with ops.no_grad():
        for chunk in _chunks(examples, batch_size):
            batch = _batch_arrays(chunk, model, model.dtype)
            audio, eeg, targets, _, n = batch
            est = _source_estimates(model, ops.constant(audio),
                                    ops.constant(eeg), n)[0]
            for i in range(len(chunk)):
                total += si_sdr(est.value[i], targets[i])
    return total / len(examples)


def train(model: BasenModel, train_examples, val_examples,
          cfg: TrainConfig = TrainConfig(), log=None, checkpoint_path=None):
    """Adam + warmup/cosine schedule; keeps the best-validation checkpoint.

    Writes one tab-separated line per epoch (epoch, mean train loss, mean
    validation SI-SDR, last learning rate) to `log` when given.  Aborts
    with the offending step, learning rate and gradient norm if the loss
    or gradients stop being finite.
    """
    if not train_examples or not val_examples:
        raise TrainingError("need non-empty train and validation sets")
    for ex in list(train_examples) + list(val_examples):
        if ex.mixture.rate != model.config.audio_rate:
            raise TrainingError(
                f"example rate {ex.mixture.rate} does not match the model's "
                f"{model.config.audio_rate}")
    order_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
    batches_per_epoch = math.ceil(len(train_examples) / cfg.batch_size)
    schedule = ScheduleConfig(cfg.max_lr, cfg.warmup_ratio,
                              cfg.epochs * batches_per_epoch)
    step = 0
    best_val = -math.inf
    best_epoch = 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(train_examples))
        loss_sum = 0.0
        seen = 0
        lr = 0.0
        for idx_chunk in _chunks(order, cfg.batch_size):
            step += 1
            lr = ops.lr_at(step, schedule)
            batch = _batch_arrays([train_examples[i] for i in idx_chunk],
                                  model, model.dtype)
            loss = _batch_loss(model, batch, cfg.loss_mode)
            ops.zero_grads(model.parameters)
            ops.backward(loss)
            gnorm = ops.grad_norm(model.parameters)
            if not (math.isfinite(float(loss.value)) and math.isfinite(gnorm)):
                raise TrainingError(
                    f"training diverged at step {step}: loss={float(loss.value)}, "
                    f"lr={lr:.10g}, grad_norm={gnorm:.10g}")
            ops.adam_step(model.parameters, lr)
            loss_sum += float(loss.value) * len(idx_chunk)
            seen += len(idx_chunk)
        mean_loss = loss_sum / seen
        val = mean_si_sdr(model, val_examples, cfg.batch_size)
        history.append({"epoch": epoch, "mean_loss": mean_loss,
                        "val_si_sdr": val, "lr": lr})
        if log is not None:
            log.write(f"{epoch}\t{mean_loss:.10g}\t{val:.10g}\t{lr:.10g}\n")
        if val > best_val:
            best_val = val
            best_epoch = epoch
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model)
    return {"history": history, "best_val_si_sdr": best_val,
            "best_epoch": best_epoch, "checkpoint_path": checkpoint_path}


# --- evaluation -------------------------------------------------------------

def _quartile_summary(values):
    q1, median, q3 = (float(v) for v in np.percentile(values, [25.0, 50.0, 75.0]))
    return {"median": median, "q1": q1, "q3": q3, "iqr": q3 - q1}


def evaluate(model, examples):
    """Per-example SI-SDR of the first separated source, plus quartiles.

    `model` only needs a separate(mixture, eeg) method, so baselines that
    pass the mixture through unchanged evaluate on the same footing.
    """
    if not examples:
        raise TrainingError("need at least one example to evaluate")
    rows = []
    for index, ex in enumerate(examples):
        estimate = model.separate(ex.mixture, ex.eeg)[0]
        out_db = si_sdr(estimate, ex.target)
        in_db = si_sdr(ex.mixture, ex.target)
        rows.append({"index": index, "si_sdr_out": out_db, "si_sdr_in": in_db,
                     "improvement": out_db - in_db})
    return {"rows": rows,
            "summary": {
                "si_sdr_out": _quartile_summary([r["si_sdr_out"] for r in rows]),
                "improvement": _quartile_summary([r["improvement"] for r in rows]),
            }}


# --- ablations ---------------------------------------------------------------

ABLATION_VARIANTS = ("audio-only", "concat", "cmca")


def _variant_sets(variant, train_ex, val_ex, test_ex):
    if variant == "audio-only":
        return (zero_eeg_examples(train_ex), zero_eeg_examples(val_ex),
                zero_eeg_examples(test_ex))
    return train_ex, val_ex, test_ex


def ablation_run(base_config: BasenConfig, train_examples, val_examples,
                 test_examples, train_cfg: TrainConfig, seed: int = 0,
                 logs=None, variants=ABLATION_VARIANTS):
    """Train and score the fusion variants on one dataset.

    audio-only feeds silent EEG to the full model, concat swaps the fusion
    for plain concatenation, cmca is the full model.  Also tabulates the
    parameter count as the fusion depth sweeps 1..5.
    """
    results = {}
    for variant in variants:
        if variant not in ABLATION_VARIANTS:
            raise TrainingError(f"unknown ablation variant {variant!r}")
        cfg = replace(base_config, fusion="concat") if variant == "concat" \
            else base_config
        model = BasenModel(cfg, seed=seed)
        tr, va, te = _variant_sets(variant, train_examples, val_examples,
                                   test_examples)
        log = logs.get(variant) if logs else None
        fit = train(model, tr, va, train_cfg, log=log)
        results[variant] = {"evaluation": evaluate(model, te),
                            "best_val_si_sdr": fit["best_val_si_sdr"],
                            "parameter_count": model.parameter_count()}
    table = [{"cmca_layers": n,
              "parameter_count": BasenModel(replace(base_config, cmca_layers=n),
                                            seed=seed).parameter_count()}
             for n in range(1, 6)]
    return {"variants": results, "parameter_table": table}
