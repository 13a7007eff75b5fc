"""Grid-to-sequence mapping and dataset construction.

A slot grid of shape (symbols, subcarriers, users, tx) becomes a real
(symbols, 2*subcarriers*users*tx) matrix: each row holds the real parts
of that symbol's coefficients in (subcarrier, user, tx) lexicographic
order followed by the imaginary parts in the same order. A training
pair observes slot i (optionally noisy) and predicts the clean slot
i+1 of the same tap process. Datasets draw a fresh tap process per
sample, with train and test seed namespaces kept disjoint.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

import numpy as np

from .channel import SNR_SET, CsiGrid, ScenarioConfig, add_awgn, gen_slot, make_taps
from .numkit import ShapeError

__all__ = [
    "SeqSample",
    "DatasetSpec",
    "derive_seed",
    "grid_to_sequence",
    "sequence_to_grid",
    "make_pair",
    "build_samples",
    "build_dataset",
    "save_manifest",
    "load_manifest",
]


def derive_seed(*parts):
    """Stable 64-bit seed from a coordinate tuple (order-sensitive)."""
    text = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class SeqSample:
    """One (previous slot -> next slot) prediction instance."""

    input: np.ndarray    # (symbols, feat) float64
    target: np.ndarray   # (symbols, feat) float64
    scenario: ScenarioConfig
    slot_index: int
    tap_seed: int
    noise_seed: int
    snr_db: float | None  # realized level (resolved when the scenario says "all")

    @property
    def feat_dim(self):
        return self.input.shape[1]


@dataclass
class DatasetSpec:
    """Deterministic recipe for one train/test split."""

    n_train: int
    n_test: int
    train_scenario: ScenarioConfig
    test_scenario: ScenarioConfig
    noise_on_input: bool = True
    normalize: bool = True
    seed: int = 0
    slot_index: int = 0


def grid_to_sequence(grid):
    """Flatten a grid to its real sequence form; exact inverse exists."""
    h = grid.h if isinstance(grid, CsiGrid) else np.asarray(grid)
    if h.ndim != 4:
        raise ShapeError(f"grid must be 4-d (symbols, subcarriers, users, tx), got {h.shape}")
    flat = h.reshape(h.shape[0], -1)
    return np.hstack([flat.real, flat.imag])


def sequence_to_grid(seq, grid_shape):
    """Invert grid_to_sequence; ``grid_shape`` is (subcarriers, users, tx)."""
    seq = np.asarray(seq, dtype=np.float64)
    half = seq.shape[1] // 2
    if seq.shape[1] != 2 * half or half != int(np.prod(grid_shape)):
        raise ShapeError(
            f"sequence width {seq.shape[1]} does not match grid shape {grid_shape}"
        )
    flat = seq[:, :half] + 1j * seq[:, half:]
    return flat.reshape((seq.shape[0],) + tuple(grid_shape))


def _resolve_snr(cfg, rng):
    if cfg.snr_db == "all":
        return float(SNR_SET[rng.integers(len(SNR_SET))])
    return cfg.snr_db


def make_pair(taps, cfg, slot_index, noise_seed, normalize=True,
              noise_on_input=True, noise_on_target=False):
    """Build one sample: observed slot i as input, clean slot i+1 as target.

    When the scenario SNR is "all", the level is drawn uniformly from
    the benchmark grid per sample. With ``normalize`` both matrices are
    scaled by the one factor that gives the input unit mean square.
    ``noise_on_target`` additionally degrades the target at the same
    level, for the variant where both observations are noisy.
    """
    rng = np.random.default_rng(noise_seed)
    snr = _resolve_snr(cfg, rng)
    grid_in = gen_slot(taps, cfg, slot_index)
    grid_tg = gen_slot(taps, cfg, slot_index + 1)
    if noise_on_input:
        grid_in = add_awgn(grid_in, snr, derive_seed(noise_seed, "input"))
    if noise_on_target:
        grid_tg = add_awgn(grid_tg, snr, derive_seed(noise_seed, "target"))
    seq_in = grid_to_sequence(grid_in)
    seq_tg = grid_to_sequence(grid_tg)
    if normalize:
        power = float(np.mean(seq_in ** 2))
        if power > 0.0:
            factor = 1.0 / np.sqrt(power)
            seq_in = seq_in * factor
            seq_tg = seq_tg * factor
    return SeqSample(
        input=seq_in,
        target=seq_tg,
        scenario=cfg,
        slot_index=slot_index,
        tap_seed=cfg.seed,
        noise_seed=noise_seed,
        snr_db=None if snr is None else float(snr),
    )


def build_samples(scenario, count, base_seed, namespace, slot_index=0,
                  normalize=True, noise_on_input=True):
    """Independent samples, one fresh tap process each; deterministic."""
    samples = []
    for i in range(count):
        tap_seed = derive_seed(base_seed, namespace, i, "taps")
        noise_seed = derive_seed(base_seed, namespace, i, "noise")
        cfg = dataclasses.replace(scenario, seed=tap_seed)
        taps = make_taps(cfg)
        samples.append(
            make_pair(taps, cfg, slot_index, noise_seed,
                      normalize=normalize, noise_on_input=noise_on_input)
        )
    return samples


def build_dataset(spec):
    """Materialize (train, test) lists; train/test seed ranges are disjoint."""
    if spec.n_train < 1 or spec.n_test < 1:
        raise ValueError("sample counts must be >= 1")
    train = build_samples(
        spec.train_scenario, spec.n_train, spec.seed, "train",
        slot_index=spec.slot_index, normalize=spec.normalize,
        noise_on_input=spec.noise_on_input,
    )
    test = build_samples(
        spec.test_scenario, spec.n_test, spec.seed, "test",
        slot_index=spec.slot_index, normalize=spec.normalize,
        noise_on_input=spec.noise_on_input,
    )
    return train, test


def save_manifest(path, spec, train, test):
    """Write a text manifest (config plus per-sample seeds) that rebuilds the dataset."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"seed = {spec.seed}\n")
        fh.write(f"n_train = {spec.n_train}\n")
        fh.write(f"n_test = {spec.n_test}\n")
        fh.write(f"slot_index = {spec.slot_index}\n")
        fh.write(f"normalize = {spec.normalize}\n")
        fh.write(f"noise_on_input = {spec.noise_on_input}\n")
        for tag, cfg in (("train", spec.train_scenario), ("test", spec.test_scenario)):
            for key, value in cfg.to_dict().items():
                fh.write(f"{tag}.{key} = {value}\n")
        fh.write("# split index tap_seed noise_seed\n")
        for tag, samples in (("train", train), ("test", test)):
            for i, s in enumerate(samples):
                fh.write(f"sample {tag} {i} {s.tap_seed} {s.noise_seed}\n")


def _parse_scalar(text):
    if text in ("True", "False"):
        return text == "True"
    if text == "None":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def load_manifest(path):
    """Rebuild the DatasetSpec recorded by save_manifest."""
    top = {}
    scen = {"train": {}, "test": {}}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("sample "):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), _parse_scalar(value.strip())
            if "." in key:
                tag, _, field = key.partition(".")
                scen[tag][field] = value
            else:
                top[key] = value
    return DatasetSpec(
        n_train=top["n_train"],
        n_test=top["n_test"],
        train_scenario=ScenarioConfig.from_dict(scen["train"]),
        test_scenario=ScenarioConfig.from_dict(scen["test"]),
        noise_on_input=top["noise_on_input"],
        normalize=top["normalize"],
        seed=top["seed"],
        slot_index=top["slot_index"],
    )
