"""Repeated split -> balance -> train -> evaluate runs, and the denoising study."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (Manifest, SurrogateConfig, add_noise, label_names, load_arrays, load_png,
                      mask_path, split, surrogate_generate)
from .evaluation import EvalReport, SSIMReport, confusion, minority_recall, ssim
from .models import GanConfig, Network, build_cnn, build_dae, denoise, predict, train_gan
from .synthdata import STRATEGIES, BalanceResources, balance, extract_mask, load_mask, median_background
from .training import AdamConfig, AugmentConfig, TrainConfig, fit, read_kv

log = logging.getLogger(__name__)

PROTOCOL_STRATEGIES = ("original",) + STRATEGIES


class ProtocolError(ValueError):
    pass


@dataclass
class Protocol:
    dataset: str = "surrogate"            # "surrogate" or a manifest path
    strategies: list[str] = field(default_factory=lambda: list(PROTOCOL_STRATEGIES))
    repetitions: int = 1
    seed: int = 0
    target: int = 150                     # per-minority-class training count after balancing
    epochs: int = 4
    batch_size: int = 32
    filters: tuple[int, ...] = (16, 32, 64)
    augment: bool = False
    resplit: bool = True                  # False: one split, repetitions vary only the seeds downstream
    gan: GanConfig = field(default_factory=lambda: GanConfig(steps=500, batch_size=8,
                                                             adam=AdamConfig(lr=1e-3, beta1=0.5)))
    gan_filters: tuple[int, ...] = (64, 32)
    gan_seed_channels: int = 64
    gan_disc_filters: tuple[int, ...] = (16, 32, 64)
    surrogate: SurrogateConfig | None = None
    mask_tau: float = 0.15

    def validate(self) -> None:
        bad = [s for s in self.strategies if s not in PROTOCOL_STRATEGIES]
        if bad:
            raise ProtocolError(f"unknown strategy {bad[0]!r}; expected one of {PROTOCOL_STRATEGIES}")
        if self.repetitions < 1:
            raise ProtocolError("repetitions must be >= 1")
        if self.dataset != "surrogate" and not Path(self.dataset).exists():
            raise ProtocolError(f"dataset manifest not found: {self.dataset}")

    @classmethod
    def load(cls, path: str | Path) -> Protocol:
        raw = read_kv(path)
        p = cls()
        sur: dict[str, str] = {}
        gan: dict[str, str] = {}
        for k, v in raw.items():
            if k.startswith("surrogate."):
                sur[k[len("surrogate."):]] = v
            elif k.startswith("gan."):
                gan[k[len("gan."):]] = v
            elif k == "dataset":
                p.dataset = v
                if v != "surrogate" and not Path(v).is_absolute():
                    p.dataset = str((Path(path).parent / v).resolve())
            elif k == "strategies":
                p.strategies = [s.strip() for s in v.split(",") if s.strip()]
            elif k in ("repetitions", "seed", "target", "epochs", "batch_size", "gan_seed_channels"):
                setattr(p, k, int(v))
            elif k in ("filters", "gan_filters", "gan_disc_filters"):
                setattr(p, k, tuple(int(f) for f in v.split(",")))
            elif k in ("augment", "resplit"):
                setattr(p, k, v.lower() in ("1", "true", "yes"))
            elif k == "mask_tau":
                p.mask_tau = float(v)
            else:
                raise ProtocolError(f"{path}: unknown protocol key {k!r}")
        if gan:
            p.gan = GanConfig(steps=int(gan.get("steps", p.gan.steps)),
                              batch_size=int(gan.get("batch_size", p.gan.batch_size)),
                              latent_dim=int(gan.get("latent_dim", p.gan.latent_dim)),
                              adam=AdamConfig(lr=float(gan.get("lr", p.gan.adam.lr)), beta1=0.5))
        if p.dataset == "surrogate" and sur:
            try:
                p.surrogate = SurrogateConfig.from_dict(sur, str(path))
            except (KeyError, ValueError) as exc:
                raise ProtocolError(str(exc)) from exc
        p.validate()
        return p


def default_surrogate(seed: int = 0, total: int = 2000, tile_size: int = 64) -> SurrogateConfig:
    """HR-1-like 4-class corpus: 95.7% defect-free, minority split 2:1:1."""
    minority = total - round(total * 0.957)
    counts = {"no-defect": total - minority, "seeded_1": minority // 2,
              "seeded_2": minority // 4, "seeded_3": minority - minority // 2 - minority // 4}
    return SurrogateConfig(tile_size=tile_size, label_set="hr1", counts=counts, seed=seed)


@dataclass
class RunResult:
    strategy: str
    run: int
    accuracy: float
    minority_recall: float
    train_size: int
    report: EvalReport | None = None


@dataclass
class ExperimentReport:
    rows: list[RunResult]
    label_set: str

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for strategy in dict.fromkeys(r.strategy for r in self.rows):
            accs = np.array([r.accuracy for r in self.rows if r.strategy == strategy])
            recs = np.array([r.minority_recall for r in self.rows if r.strategy == strategy])
            out[strategy] = {"accuracy_mean": float(accs.mean()), "accuracy_std": float(accs.std()),
                             "minority_recall_mean": float(np.nanmean(recs)),
                             "minority_recall_std": float(np.nanstd(recs)), "runs": int(accs.size)}
        return out

    def to_json(self) -> str:
        body = {"label_set": self.label_set,
                "runs": [{"strategy": r.strategy, "run": r.run, "accuracy": r.accuracy,
                          "minority_recall": r.minority_recall, "train_size": r.train_size}
                         for r in self.rows],
                "summary": self.summary()}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"{'Dataset':<10} {'Classes':>7}  {'Train data':<10} {'Testing Accuracy (%)':>22}  "
                 f"{'Minority recall (%)':>20}"]
        k = len(label_names(self.label_set))
        for strategy, s in self.summary().items():
            name = "Original" if strategy == "original" else strategy.upper()
            lines.append(f"{self.label_set:<10} {k:>7}  {name:<10} "
                         f"{100 * s['accuracy_mean']:>14.1f} ± {100 * s['accuracy_std']:>4.1f}  "
                         f"{100 * s['minority_recall_mean']:>12.1f} ± {100 * s['minority_recall_std']:>4.1f}")
        lines.append("")
        lines.append("per run:")
        for r in self.rows:
            lines.append(f"  {r.strategy:<8} run {r.run:>2}  acc {100 * r.accuracy:5.1f}  "
                         f"minority recall {100 * r.minority_recall:5.1f}  (train n={r.train_size})")
        return "\n".join(lines) + "\n"


def collect_masks(train: Manifest, classes: list[str], tau: float) -> dict[str, list]:
    """Ground-truth masks when the corpus ships them, otherwise threshold extraction."""
    pool: dict[str, list] = {c: [] for c in classes}
    for e in train.entries:
        if e.label not in pool:
            continue
        mp = mask_path(train, e)
        if mp.exists():
            pool[e.label].append(load_mask(mp))
        else:
            tile = load_png(train.resolve(e), e.label)
            try:
                pool[e.label].append(extract_mask(tile, tau=tau, background=median_background(tile)))
            except ValueError:
                log.warning("no defect pixels found in %s", e.path)
    return pool


def prepare_dataset(protocol: Protocol, workdir: Path) -> Manifest:
    if protocol.dataset == "surrogate":
        cfg = protocol.surrogate or default_surrogate(protocol.seed)
        manifest, _ = surrogate_generate(cfg, workdir / "corpus")
        return manifest
    return Manifest.load(protocol.dataset)


def run_experiment(protocol: Protocol, workdir: str | Path, manifest: Manifest | None = None,
                   progress=None) -> ExperimentReport:
    """Run every strategy ``repetitions`` times with seeds ``seed + run_index``.

    With ``protocol.resplit`` each repetition draws its own train/test split;
    otherwise the split (and any GAN generators) is made once from ``seed``.
    """
    protocol.validate()
    workdir = Path(workdir)
    if manifest is None:
        manifest = prepare_dataset(protocol, workdir)
    names = label_names(manifest.label_set)
    rows: list[RunResult] = []
    generators: dict[int, dict] = {}
    for run in range(protocol.repetitions):
        run_seed = protocol.seed + run
        split_seed = run_seed if protocol.resplit else protocol.seed
        train_m, test_m = split(manifest, seed=split_seed, stratified=True)
        x_test, y_test = load_arrays(test_m)
        counts = {c: sum(1 for e in train_m.entries if e.label == c) for c in names}
        minority = [c for c in names[1:] if counts[c] > 0]
        targets = {c: max(protocol.target, counts[c]) for c in minority}
        resources = BalanceResources()
        if any(s in ("cds", "rds") for s in protocol.strategies):
            resources.mask_pool = collect_masks(train_m, minority, protocol.mask_tau)
            resources.clean_pool = [train_m.resolve(e) for e in train_m.entries if e.label == names[0]]
        if "gan" in protocol.strategies:
            # generators depend only on the training split
            if split_seed not in generators:
                generators[split_seed] = _train_generators(train_m, minority, protocol, split_seed)
            resources.generators = generators[split_seed]
        for strategy in protocol.strategies:
            if strategy == "original":
                augmented = train_m
            else:
                augmented = balance(train_m, strategy, targets, seed=run_seed, resources=resources,
                                    out_root=workdir / f"run{run:02d}" / strategy)
            x_train, y_train = load_arrays(augmented)
            spec = build_cnn(x_train.shape[1:], len(names), filters=protocol.filters,
                             label_set=manifest.label_set, class_names=names)
            net = Network(spec, seed=run_seed)
            cfg = TrainConfig(batch_size=protocol.batch_size, max_epochs=protocol.epochs, seed=run_seed,
                              augment=AugmentConfig(enabled=protocol.augment))
            fit(net, x_train, y_train, cfg)
            _, pred = predict(net, x_test)
            cm = confusion(pred, y_test, len(names), names, manifest.label_set)
            result = RunResult(strategy, run, cm.accuracy(), minority_recall(cm), len(x_train),
                               EvalReport(cm, title=f"{strategy} run {run}"))
            rows.append(result)
            if progress is not None:
                progress(result)
            log.info("run %d %s acc %.3f minority recall %.3f", run, strategy, result.accuracy,
                     result.minority_recall)
    return ExperimentReport(rows, manifest.label_set)


def _train_generators(train: Manifest, classes: list[str], protocol: Protocol, seed: int) -> dict:
    from .models import build_gan

    gens = {}
    for k, cls in enumerate(classes):
        sub = train.with_entries([e for e in train.entries if e.label == cls])
        x, _ = load_arrays(sub)
        cfg = GanConfig(steps=protocol.gan.steps, batch_size=min(protocol.gan.batch_size, len(x)),
                        latent_dim=protocol.gan.latent_dim, adam=protocol.gan.adam, seed=seed * 31 + k)
        gspec, dspec = build_gan(cfg.latent_dim, x.shape[1:], seed_channels=protocol.gan_seed_channels,
                                 gen_filters=protocol.gan_filters, disc_filters=protocol.gan_disc_filters)
        gen, _, _ = train_gan(x, cfg, label=cls, gen=Network(gspec, seed=cfg.seed),
                              disc=Network(dspec, seed=cfg.seed + 1))
        gens[cls] = gen
    return gens


# denoising study

@dataclass
class DenoiseResult:
    ssim_noisy: SSIMReport
    ssim_reconstructed: SSIMReport
    accuracy_clean: float
    accuracy_noisy: float
    accuracy_reconstructed: float

    def to_text(self) -> str:
        return (f"{'SSIM noisy':<22}{self.ssim_noisy.mean:.3f}\n"
                f"{'SSIM reconstructed':<22}{self.ssim_reconstructed.mean:.3f}\n"
                f"{'accuracy clean (%)':<22}{100 * self.accuracy_clean:.1f}\n"
                f"{'accuracy noisy (%)':<22}{100 * self.accuracy_noisy:.1f}\n"
                f"{'accuracy recon (%)':<22}{100 * self.accuracy_reconstructed:.1f}\n")


def noisy_copies(x: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.stack([add_noise(img, sigma, rng) for img in x])


def train_dae(x_train: np.ndarray, sigma: float = 0.3, seed: int = 0, epochs: int = 10,
              filters: int = 32, batch_size: int = 32, blind: bool = True):
    """Fit a DAE mapping noisy tiles back to ``x_train``; noise is redrawn for every batch.

    With ``blind`` each tile's noise level is drawn uniformly from [0, sigma], so the
    model also learns to pass clean tiles through; otherwise every tile gets ``sigma``.
    """
    dae = Network(build_dae(x_train.shape[1:], filters=filters), seed=seed)
    cfg = TrainConfig(batch_size=batch_size, max_epochs=epochs, seed=seed)

    def corrupt(xb, rng):
        level = rng.uniform(0, sigma, (len(xb), 1, 1, 1)) if blind else sigma
        return np.clip(xb + level * rng.normal(0, 1, xb.shape), 0, 1).astype(np.float32)

    _, hist = fit(dae, x_train, x_train, cfg, loss="mse", input_transform=corrupt)
    dae.metadata.update({"sigma": sigma, "blind": blind, "epochs": len(hist.loss)})
    return dae, hist


def run_denoise_study(x_train: np.ndarray, x_test: np.ndarray, y_test: np.ndarray, cnn: Network,
                      sigma: float = 0.3, seed: int = 0, epochs: int = 10, filters: int = 32,
                      dae: Network | None = None):
    """Train a DAE (noisy -> clean), then compare SSIM and CNN accuracy on noisy vs reconstructed tiles.

    A given ``dae`` is used as is. Returns (dae, DenoiseResult).
    """
    if dae is None:
        dae, _ = train_dae(x_train, sigma=sigma, seed=seed, epochs=epochs, filters=filters)
    noisy = noisy_copies(x_test, sigma, seed + 1)
    recon = denoise(dae, noisy)
    ssim_noisy = SSIMReport([ssim(a, b) for a, b in zip(x_test, noisy)])
    ssim_recon = SSIMReport([ssim(a, b) for a, b in zip(x_test, recon)])
    acc = [float((predict(cnn, x)[1] == y_test).mean()) for x in (x_test, noisy, recon)]
    return dae, DenoiseResult(ssim_noisy, ssim_recon, *acc)
