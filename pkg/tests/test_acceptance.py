"""Acceptance criteria at desk scale.

Each test prints one ``[PASS]``/``[FAIL]`` line through the capture so the
verdicts appear in ``pytest -v`` output, then asserts.  The heavy runs (the
default K=0 pretrain and the 10-cell grid) are cached per session.
"""

import time

import numpy as np
import pytest

from adadiff.acoustic import AcousticModel, make_batch
from adadiff.adaptation import (
    AdaptationConfig, FinetuneSet, TrainPlan, accounting, accounting_closed_form, adapt, pretrain, select_trainable,
)
from adadiff.autodiff import ParamStore, RngStream, Tensor, grad_check, no_grad, ops
from adadiff.checkpoint import decode_checkpoint, encode_checkpoint
from adadiff.cli import main
from adadiff.config import RunConfig
from adadiff.denoiser import cln_apply, count_denoiser_params, init_cln
from adadiff.diffusion import make_schedule, q_sample, sample
from adadiff.evaluation import compare_settings, default_cell_factory, reconstruction_error, run_grid

from _cases import denoiser_gradcheck, mixed_decoder_gradcheck, op_cases, oracle_denoiser, plain_ln_decode

pytestmark = pytest.mark.slow

SEEDS = range(20)


def verdict(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
    assert ok, detail


@pytest.fixture(scope="session")
def desk(default_corpus):
    """The default K=0 checkpoint: 2000 + 1000 steps on the desk corpus."""
    cfg, corpus, views = default_corpus
    start = time.perf_counter()
    result = pretrain(views["train"], TrainPlan.from_run(cfg), cfg, seed=cfg.seed)
    return result, time.perf_counter() - start


# -- 1 ------------------------------------------------------------------------------------

def test_c1_paper_scale_accounting(capsys):
    start = time.perf_counter()
    cfg = RunConfig.paper_scale()
    model = AcousticModel.create(cfg, [0, 1], None, 0)
    counts = accounting(model, 0)
    closed = accounting_closed_form(cfg)
    total = count_denoiser_params(model.denoiser.config)["total"]
    elapsed = time.perf_counter() - start
    ok = (counts == closed and counts["SpkEmbPlusCLN"] == 131_584 and 3.0e6 <= total <= 4.0e6 and elapsed < 1.0)
    verdict(capsys, 1, ok, f"SpkEmbPlusCLN={counts['SpkEmbPlusCLN']} denoiser={total} in {elapsed:.2f}s")


# -- 2 ------------------------------------------------------------------------------------

def test_c2_gradient_checks(capsys):
    start = time.perf_counter()
    worst = (0.0, "")
    for seed in SEEDS:
        reports = [(name, grad_check(fn, point)) for name, fn, point in op_cases(np.random.default_rng(seed))]
        reports.append(("denoiser", denoiser_gradcheck(seed)))
        reports.append(("mixed_decoder", mixed_decoder_gradcheck(seed)))
        for name, rep in reports:
            if rep.max_rel_error >= worst[0]:
                worst = (rep.max_rel_error, f"{name} seed {seed}")
    elapsed = time.perf_counter() - start
    ok = worst[0] < 1e-4 and elapsed < 120
    verdict(capsys, 2, ok, f"max rel err {worst[0]:.2e} ({worst[1]}) over {len(SEEDS)} seeds in {elapsed:.1f}s")


# -- 3 ------------------------------------------------------------------------------------

def test_c3_cln_at_init_is_layer_norm(capsys, default_corpus):
    cfg, corpus, _ = default_corpus
    P = ParamStore()
    C, cond_dim = cfg.channels, cfg.speaker_dim + cfg.step_cln_dim
    init_cln(P, "denoiser.cln", cond_dim, C)
    model = AcousticModel.create(cfg.replace(dec_layers=2), corpus.train_speakers, None, 0)
    r = np.random.default_rng(2024)
    den_bad = tr_bad = 0
    for _ in range(100):
        h = Tensor(r.normal(size=(2, C, 9)).astype(np.float32))
        cond = Tensor(r.normal(size=(2, cond_dim)).astype(np.float32))
        den_bad += cln_apply(h, cond, P, "denoiser.cln").data.tobytes() != ops.layer_norm(h, axis=1).data.tobytes()
        frames = Tensor(r.normal(size=(2, 9, cfg.enc_dim)).astype(np.float32))
        spk = Tensor(r.normal(size=(2, cfg.speaker_dim)).astype(np.float32))
        mask = np.ones((2, 1, 9), np.float32)
        mask[1, 0, int(r.integers(3, 9)):] = 0
        with no_grad():
            ours = model.transformer_decode(frames, spk, mask).data
            ref = plain_ln_decode(model, frames, mask).data
        tr_bad += ours.tobytes() != ref.tobytes()
    verdict(capsys, 3, den_bad == tr_bad == 0, f"mismatches over 100 pairs: denoiser {den_bad}, transformer {tr_bad}")


# -- 4 ------------------------------------------------------------------------------------

def test_c4_forward_process_and_oracle_sampling(capsys):
    s = make_schedule(400)
    z0, sigma, n = np.array([0.7, -1.3]), np.array([0.5, 2.0]), 100_000
    worst_se = 0.0
    for t in (1, 37, 150, 299, 400):
        eps = RngStream(11, t).normal((n, 2), dtype=np.float64)
        z = q_sample(np.broadcast_to(z0, (n, 2)).copy(), t, eps, sigma, s)
        ab = s.alpha_bar(t)
        m_ref, v_ref = np.sqrt(ab) * z0, (1 - ab) * sigma ** 2
        worst_se = max(worst_se, np.max(np.abs(z.mean(0) - m_ref) / np.sqrt(v_ref / n)),
                       np.max(np.abs(z.var(0, ddof=1) - v_ref) / (v_ref * np.sqrt(2 / (n - 1)))))
    worst_rms = 0.0
    for T in range(1, 5):
        st = make_schedule(T, 0.05, 0.4)
        for seed in range(5):
            r = np.random.default_rng(seed)
            x0 = r.normal(size=(2, 4, 7)).astype(np.float32)
            mu = r.normal(size=x0.shape).astype(np.float32)
            sd = r.uniform(0.5, 2, size=x0.shape).astype(np.float32)
            out = sample(oracle_denoiser(x0, st), mu, sd, st, seed)
            worst_rms = max(worst_rms, float(np.sqrt(np.mean((out - mu - x0) ** 2))))
    ok = worst_se < 3 and worst_rms < 1e-4
    verdict(capsys, 4, ok, f"worst moment deviation {worst_se:.2f} SE; oracle RMS {worst_rms:.1e}")


# -- 5 ------------------------------------------------------------------------------------

def test_c5_desk_pretrain(capsys, desk, default_corpus):
    cfg, corpus, views = default_corpus
    result, elapsed = desk
    L = np.convolve(result.losses, np.ones(100) / 100, mode="valid")
    drop = 1 - L[-1] / L[0]
    u = views["train"][0]
    batch = make_batch([u])
    mse, _ = reconstruction_error(result.model.synthesize(batch, 0), batch.mel, batch.frame_mask)
    ok = drop >= 0.5 and mse < 0.05 and elapsed < 900
    verdict(capsys, 5, ok, f"smoothed loss drop {drop:.1%}; train utterance {u.id} MSE {mse:.4f}; {elapsed:.0f}s")


# -- 6 ------------------------------------------------------------------------------------

def test_c6_finetune_set_ordering(capsys, desk, default_corpus, default_probe):
    cfg, corpus, _ = default_corpus
    start = time.perf_counter()
    seeds = list(range(cfg.compare_seeds))
    table = compare_settings(desk[0].model, corpus, default_probe, seeds, AdaptationConfig.from_run(cfg), cfg,
                             n_batches=cfg.seed_batches)
    elapsed = time.perf_counter() - start
    votes = table.batch_votes()
    mse_votes = sum(v["mse"] for v in votes)
    cos_votes = sum(v["cosine"] for v in votes)
    agg = table.aggregate()
    means = "; ".join(f"{k} mse {a.mse_mean:.4f} cos {a.cosine_mean:.3f}" for k, a in agg.items())
    ok = len(votes) == 5 and mse_votes >= 4 and cos_votes >= 4 and elapsed < 1800
    verdict(capsys, 6, ok, f"batch votes mse {mse_votes}/5 cosine {cos_votes}/5 in {elapsed:.0f}s ({means})")


# -- 7 ------------------------------------------------------------------------------------

def test_c7_architecture_grid(capsys, default_corpus, default_probe):
    cfg, corpus, _ = default_corpus
    start = time.perf_counter()
    grid = run_grid(default_cell_factory(cfg), corpus, default_probe, list(range(cfg.grid_seeds)))
    elapsed = time.perf_counter() - start
    a = grid.mean("cosine", K=4) > grid.mean("cosine", K=0)
    b = grid.mean("mse", K=0, cln=True) < grid.mean("mse", K=0, cln=False)
    c = grid.trend_ok("mse")
    means, _ = grid.by_K("mse")
    ok = a and b and c and elapsed < 7200
    detail = (f"(a) cos K4 {grid.mean('cosine', K=4):.3f} vs K0 {grid.mean('cosine', K=0):.3f} {a}; "
              f"(b) K0 mse on {grid.mean('mse', K=0, cln=True):.4f} vs off {grid.mean('mse', K=0, cln=False):.4f} {b}; "
              f"(c) mse by K {np.round(means, 4).tolist()} violations {grid.trend_violations('mse')} {c}; "
              f"{elapsed:.0f}s")
    verdict(capsys, 7, ok, detail)


# -- 8 ------------------------------------------------------------------------------------

def test_c8_frozen_parameters_bit_identical(capsys, desk, default_corpus):
    cfg, corpus, _ = default_corpus
    base = desk[0].model
    spk = corpus.heldout_speakers[0]
    target = corpus.select("adapt", spk)
    changed = {}
    for fs in FinetuneSet:
        out = adapt(base, target, fs, AdaptationConfig(steps=2000, lr=cfg.adapt_lr), cfg, seed=0).model
        mask = select_trainable(out, fs, spk)
        changed[fs.value] = [n for n, on in mask.items() if not on
                             and out.params[n].data.tobytes() != base.params[n].data.tobytes()]
    ok = not any(changed.values())
    verdict(capsys, 8, ok, "frozen parameters changed: " + ", ".join(f"{k} {len(v)}" for k, v in changed.items()))


# -- 9 ------------------------------------------------------------------------------------

def test_c9_reruns_and_round_trip(capsys, tmp_path, desk):
    cfg = RunConfig(stage1_steps=60, stage2_steps=30, adapt_steps=20, compare_seeds=2, seed_batches=2,
                    probe_steps=200)
    conf = tmp_path / "run.conf"
    conf.write_text(cfg.dump(), encoding="utf-8")
    for run in ("a", "b"):
        d = tmp_path / run
        assert main(["train", "--config", str(conf), "--seed", "3", "--out", str(d / "train")]) == 0
        assert main(["eval", "--config", str(conf), "--seed", "3", "--checkpoint", str(d / "train" / "model.addm"),
                     "--out", str(d / "eval")]) == 0
    same = {f"{step}/{name}": (tmp_path / "a" / step / name).read_bytes() == (tmp_path / "b" / step / name).read_bytes()
            for step, name in (("train", "model.addm"), ("train", "run_manifest.txt"), ("eval", "metrics.csv"),
                               ("eval", "run_manifest.txt"))}
    model = desk[0].model
    blob = encode_checkpoint(model)
    back = decode_checkpoint(blob)
    exact = encode_checkpoint(back) == blob and all(
        back.params[n].data.tobytes() == model.params[n].data.tobytes() for n in model.params)
    ok = all(same.values()) and exact
    verdict(capsys, 9, ok, f"rerun identical {same}; checkpoint round-trip bit-exact {exact}")
