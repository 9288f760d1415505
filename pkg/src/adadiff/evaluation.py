"""Reconstruction metrics, the speaker probe, setting comparison and the K x CLN grid."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .acoustic import AcousticModel, make_batch
from .adaptation import AdaptationConfig, FinetuneSet, TrainPlan, adapt, pretrain
from .autodiff import Adam, ParamStore, RngStream, Tape, backward, no_grad, ops, stream_id
from .config import RunConfig
from .corpus import Corpus, Utterance, split

log = logging.getLogger(__name__)

CSV_COLUMNS = ["setting", "K", "cln", "seed", "mse", "lsd", "cosine", "runtime_s"]


class EvaluationError(RuntimeError):
    pass


def reconstruction_error(pred: np.ndarray, ref: np.ndarray, mask: np.ndarray | None = None) -> tuple[float, float]:
    """(MSE, LSD) between mels shaped (..., D, L).

    LSD is the mean over frames of the per-frame RMS difference across bins.
    ``mask`` (..., 1, L) restricts both to real frames.
    """
    pred = np.asarray(pred, np.float64)
    ref = np.asarray(ref, np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs ref {ref.shape}")
    sq = (pred - ref) ** 2
    if mask is None:
        mask = np.ones(sq.shape[:-2] + (1, sq.shape[-1]))
    mask = np.broadcast_to(np.asarray(mask, np.float64), sq.shape[:-2] + (1, sq.shape[-1]))
    n_frames = mask.sum()
    if n_frames == 0:
        raise ValueError("no frames to compare")
    D = sq.shape[-2]
    mse = float((sq * mask).sum() / (n_frames * D))
    per_frame = np.sqrt(sq.mean(axis=-2, keepdims=True))
    lsd = float((per_frame * mask).sum() / n_frames)
    return mse, lsd


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# -- speaker probe ---------------------------------------------------------------------

@dataclass
class SpeakerProbe:
    """One-hidden-layer frame classifier over training speakers.

    The embedding of a mel is its hidden activations averaged over frames,
    minus the average embedding of the training frames so that cosines
    measure speaker-specific direction rather than the shared offset.
    """

    hidden: int = 64
    steps: int = 600
    lr: float = 1e-2
    seed: int = 0
    params: ParamStore | None = None
    speakers: list[int] = field(default_factory=list)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    center: np.ndarray | None = None
    train_accuracy: float = float("nan")

    @property
    def trained(self) -> bool:
        return self.params is not None

    def _hidden(self, frames: np.ndarray):
        x = (frames - self.mean) / self.std
        P = self.params
        return ops.tanh(ops.affine(x.astype(np.float32), P["w1"], P["b1"]))

    def _logits(self, h):
        return ops.affine(h, self.params["w2"], self.params["b2"])

    def fit(self, utterances: Sequence[Utterance]) -> "SpeakerProbe":
        frames = np.concatenate([u.mel.T for u in utterances]).astype(np.float64)
        labels_raw = np.concatenate([np.full(u.n_frames, u.speaker) for u in utterances])
        self.speakers = sorted(set(labels_raw.tolist()))
        labels = np.searchsorted(self.speakers, labels_raw)
        self.mean = frames.mean(axis=0)
        self.std = frames.std(axis=0) + 1e-6
        D, S = frames.shape[1], len(self.speakers)
        rng = RngStream(self.seed, stream_id("probe"))
        P = ParamStore()
        P.add("w1", rng.normal((D, self.hidden)) / np.sqrt(D))
        P.add("b1", np.zeros(self.hidden, np.float32))
        P.add("w2", rng.normal((self.hidden, S)) / np.sqrt(self.hidden))
        P.add("b2", np.zeros(S, np.float32))
        self.params = P
        onehot = np.eye(S, dtype=np.float32)[labels]
        opt = Adam(lr=self.lr, beta2=0.999, eps=1e-8)
        for _ in range(self.steps):
            with Tape():
                loss = ops.mse(self._logits(self._hidden(frames)), onehot)
                grads = backward(loss, P)
            opt.step(P, grads)
        with no_grad():
            h = self._hidden(frames)
            pred = self._logits(h).data.argmax(axis=1)
        self.train_accuracy = float((pred == labels).mean())
        self.center = h.data.mean(axis=0).astype(np.float64)
        if self.train_accuracy < 0.95:
            raise EvaluationError(f"speaker probe reached only {self.train_accuracy:.3f} train accuracy")
        return self

    def embed(self, mel: np.ndarray, n_frames: int | None = None) -> np.ndarray:
        """Embedding of one mel (D, L); only the first ``n_frames`` frames count."""
        if not self.trained:
            raise EvaluationError("speaker probe is not trained")
        mel = np.asarray(mel)
        if n_frames is not None:
            mel = mel[:, :n_frames]
        with no_grad():
            h = self._hidden(mel.T.astype(np.float64)).data
        return h.mean(axis=0).astype(np.float64) - self.center

    def centroid(self, utterances: Sequence[Utterance]) -> np.ndarray:
        return np.mean([self.embed(u.mel) for u in utterances], axis=0)


def speaker_similarity(pred: np.ndarray, reference: Sequence[Utterance] | np.ndarray, probe: SpeakerProbe,
                       n_frames: int | None = None) -> float:
    """Cosine between the probe embedding of ``pred`` and the centroid of ``reference``.

    ``reference`` is a list of real utterances of the target speaker or an
    already computed centroid.
    """
    if not probe.trained:
        raise EvaluationError("speaker probe is not trained")
    ref = reference if isinstance(reference, np.ndarray) else probe.centroid(reference)
    return cosine(probe.embed(pred, n_frames), ref)


# -- metrics rows -----------------------------------------------------------------------

@dataclass
class MetricsRow:
    setting: str
    mse: float
    lsd: float
    cosine: float
    seed: int
    runtime_s: float
    K: int = 0
    cln: bool = True

    def __post_init__(self):
        vals = (self.mse, self.lsd, self.cosine, self.runtime_s)
        if not all(np.isfinite(v) for v in vals):
            raise EvaluationError(f"non-finite metric in {self.setting} seed {self.seed}")
        if not -1.0 <= self.cosine <= 1.0:
            raise EvaluationError(f"cosine {self.cosine} outside [-1, 1]")

    def as_csv(self) -> dict:
        return {"setting": self.setting, "K": self.K, "cln": "on" if self.cln else "off", "seed": self.seed,
                "mse": self.mse, "lsd": self.lsd, "cosine": self.cosine, "runtime_s": self.runtime_s}


def evaluate_speaker(model: AcousticModel, test: Sequence[Utterance], probe: SpeakerProbe,
                     seed: int, centroid: np.ndarray | None = None) -> tuple[float, float, float]:
    """Synthesize every test utterance; return (MSE, LSD, mean cosine)."""
    batch = make_batch(list(test))
    pred = model.synthesize(batch, seed)
    mse, lsd = reconstruction_error(pred, batch.mel, batch.frame_mask)
    ref = probe.centroid(test) if centroid is None else centroid
    lengths = batch.lengths
    cos = float(np.mean([speaker_similarity(pred[i], ref, probe, int(lengths[i])) for i in range(batch.size)]))
    return mse, lsd, cos


def adapt_and_evaluate(model: AcousticModel, corpus: Corpus, finetune_set: FinetuneSet | str,
                       adapt_cfg: AdaptationConfig, run: RunConfig, probe: SpeakerProbe,
                       seed: int, label: str | None = None) -> MetricsRow:
    """Adapt to every held-out speaker separately and average their metrics."""
    fs = FinetuneSet.parse(finetune_set)
    start = time.perf_counter()
    scores = []
    for spk in corpus.heldout_speakers:
        adapted = adapt(model, corpus.select("adapt", spk), fs, adapt_cfg, run, seed).model
        scores.append(evaluate_speaker(adapted, corpus.select("test", spk), probe, seed))
    mse, lsd, cos = (float(np.mean(col)) for col in zip(*scores))
    return MetricsRow(label or fs.value, mse, lsd, cos, seed, time.perf_counter() - start,
                      run.dec_layers, run.cln_in_denoiser)


# -- setting comparison -----------------------------------------------------------------

SETTINGS_ORDER = (FinetuneSet.WholeDecoder, FinetuneSet.SpkEmbPlusCLN, FinetuneSet.SpkEmbOnly)


@dataclass
class Aggregate:
    setting: str
    mse_mean: float
    mse_std: float
    cosine_mean: float
    cosine_std: float
    lsd_mean: float
    n: int

    @classmethod
    def of(cls, setting: str, rows: Sequence[MetricsRow]) -> "Aggregate":
        m = np.array([r.mse for r in rows])
        c = np.array([r.cosine for r in rows])
        l = np.array([r.lsd for r in rows])
        return cls(setting, float(m.mean()), float(m.std(ddof=1)) if len(m) > 1 else 0.0,
                   float(c.mean()), float(c.std(ddof=1)) if len(c) > 1 else 0.0, float(l.mean()), len(rows))


@dataclass
class ComparisonTable:
    rows: list[MetricsRow]
    batches: list[list[int]]

    def settings(self) -> list[str]:
        return list(dict.fromkeys(r.setting for r in self.rows))

    def aggregate(self, seeds: Iterable[int] | None = None) -> dict[str, Aggregate]:
        keep = None if seeds is None else set(seeds)
        out = {}
        for s in self.settings():
            rows = [r for r in self.rows if r.setting == s and (keep is None or r.seed in keep)]
            out[s] = Aggregate.of(s, rows)
        return out

    def ordering_holds(self, seeds: Iterable[int] | None = None) -> dict[str, bool]:
        """WholeDecoder <= SpkEmbPlusCLN <= SpkEmbOnly on MSE, reversed on cosine."""
        agg = self.aggregate(seeds)
        w, c, o = (agg[s.value] for s in SETTINGS_ORDER)
        return {"mse": w.mse_mean <= c.mse_mean <= o.mse_mean,
                "cosine": w.cosine_mean >= c.cosine_mean >= o.cosine_mean}

    def batch_votes(self) -> list[dict[str, bool]]:
        return [self.ordering_holds(b) for b in self.batches]


def compare_settings(model: AcousticModel, corpus: Corpus, probe: SpeakerProbe, seeds: Sequence[int],
                     adapt_cfg: AdaptationConfig, run: RunConfig,
                     finetune_sets: Sequence[FinetuneSet | str] = SETTINGS_ORDER,
                     n_batches: int = 5) -> ComparisonTable:
    """Adapt the pretrained ``model`` under each finetune set, once per seed.

    Seeds are split into ``n_batches`` contiguous batches for the rank-order vote.
    """
    if model.config.dec_layers != 0:
        raise ValueError("compare_settings expects a K=0 checkpoint")
    rows = []
    for seed in seeds:
        for fs in finetune_sets:
            rows.append(adapt_and_evaluate(model, corpus, fs, adapt_cfg, run, probe, seed))
            log.info("%s seed %d mse %.4f cos %.3f", rows[-1].setting, seed, rows[-1].mse, rows[-1].cosine)
    batches = [list(map(int, b)) for b in np.array_split(np.asarray(seeds), n_batches) if len(b)]
    return ComparisonTable(rows, batches)


# -- grid ---------------------------------------------------------------------------------

GRID_CELLS = tuple((K, cln) for K in range(5) for cln in (False, True))


def cell_name(K: int, cln: bool) -> str:
    return f"K{K}-cln{'on' if cln else 'off'}"


@dataclass
class GridResult:
    cells: dict[tuple[int, bool], list[MetricsRow]]

    def __post_init__(self):
        missing = [c for c in GRID_CELLS if c not in self.cells]
        if missing:
            raise EvaluationError(f"grid is missing cells {missing}")

    def rows(self) -> list[MetricsRow]:
        return [r for c in GRID_CELLS for r in self.cells[c]]

    def aggregate(self) -> dict[tuple[int, bool], Aggregate]:
        return {c: Aggregate.of(cell_name(*c), self.cells[c]) for c in GRID_CELLS}

    def by_K(self, metric: str) -> tuple[np.ndarray, np.ndarray]:
        """Mean and std of ``metric`` per K, pooling both CLN settings and all seeds."""
        means, stds = [], []
        for K in range(5):
            vals = np.array([getattr(r, metric) for cln in (False, True) for r in self.cells[(K, cln)]])
            means.append(vals.mean())
            stds.append(vals.std(ddof=1) if len(vals) > 1 else 0.0)
        return np.array(means), np.array(stds)

    def mean(self, metric: str, K: int | None = None, cln: bool | None = None) -> float:
        vals = [getattr(r, metric) for (k, c), rows in self.cells.items() for r in rows
                if (K is None or k == K) and (cln is None or c == cln)]
        return float(np.mean(vals))

    def trend_violations(self, metric: str = "mse") -> list[tuple[int, float, float]]:
        """Adjacent K pairs where the mean rises; (K, rise, pooled std of the pair)."""
        means, stds = self.by_K(metric)
        out = []
        for K in range(4):
            rise = means[K + 1] - means[K]
            if rise > 0:
                pooled = float(np.sqrt((stds[K] ** 2 + stds[K + 1] ** 2) / 2))
                out.append((K, float(rise), pooled))
        return out

    def trend_ok(self, metric: str = "mse") -> bool:
        v = self.trend_violations(metric)
        return len(v) == 0 or (len(v) == 1 and v[0][1] <= v[0][2])


CellFactory = Callable[[int, bool], RunConfig]


def default_cell_factory(base: RunConfig) -> CellFactory:
    def make(K: int, cln: bool) -> RunConfig:
        return base.replace(dec_layers=K, cln_in_denoiser=cln)
    return make


def run_cell(cfg: RunConfig, corpus: Corpus, probe: SpeakerProbe, seed: int) -> MetricsRow:
    """Pretrain one cell config, adapt (SpkEmbPlusCLN) to every held-out speaker, score."""
    name = cell_name(cfg.dec_layers, cfg.cln_in_denoiser)
    start = time.perf_counter()
    try:
        model = pretrain(split(corpus)["train"], TrainPlan.from_run(cfg), cfg, seed).model
        row = adapt_and_evaluate(model, corpus, cfg.finetune_set, AdaptationConfig.from_run(cfg), cfg,
                                 probe, seed, label=name)
    except Exception as exc:
        raise EvaluationError(f"grid cell {name} seed {seed} failed: {exc}") from exc
    return replace(row, runtime_s=time.perf_counter() - start)


def _run_cell_job(args):
    return run_cell(*args)


def run_grid(factory: CellFactory, corpus: Corpus, probe: SpeakerProbe, seeds: Sequence[int],
             workers: int = 1) -> GridResult:
    """All 10 (K, cln) cells times ``seeds``; cells are independent and may run in worker processes."""
    if len(seeds) < 3:
        raise ValueError("the grid needs at least 3 seeds per cell")
    jobs = [(factory(K, cln), corpus, probe, int(s)) for K, cln in GRID_CELLS for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_cell_job, jobs))
    else:
        results = [_run_cell_job(j) for j in jobs]
    cells: dict[tuple[int, bool], list[MetricsRow]] = {c: [] for c in GRID_CELLS}
    for (cfg, _, _, _), row in zip(jobs, results):
        cells[(cfg.dec_layers, cfg.cln_in_denoiser)].append(row)
    return GridResult(cells)


def grid_summary_rows(grid: GridResult) -> list[dict]:
    out = []
    for (K, cln), a in grid.aggregate().items():
        out.append({"setting": a.setting, "K": K, "cln": "on" if cln else "off", "n": a.n,
                    "mse_mean": a.mse_mean, "mse_std": a.mse_std, "cosine_mean": a.cosine_mean,
                    "cosine_std": a.cosine_std, "lsd_mean": a.lsd_mean})
    return out


SUMMARY_COLUMNS = ["setting", "K", "cln", "n", "mse_mean", "mse_std", "cosine_mean", "cosine_std", "lsd_mean"]


def train_probe(corpus: Corpus, run: RunConfig, seed: int = 0) -> SpeakerProbe:
    return SpeakerProbe(hidden=run.probe_hidden, steps=run.probe_steps, seed=seed).fit(split(corpus)["train"])
