"""Acceptance criteria, each checked at its stated tolerance.

Every test records a PASS/FAIL line that is repeated in the pytest terminal
summary. Criterion 4 is the long synthetic benchmark (about 15-20 minutes on
one core).
"""

import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from acceptance_log import record
from gaitscore import cli
from gaitscore import contrastive as C
from gaitscore import encoder as E
from gaitscore import pipeline as P
from gaitscore.data_io import FormatError, format_recording_jsonl, read_ntu_skeleton, read_recording_jsonl
from gaitscore.synth import SynthConfig, generate, oracle_score
from test_data_io import ntu_text, ramp_body

ROOT = Path(__file__).resolve().parents[1]

BENCH_SEEDS = (0, 1, 2)
FRACTIONS = (0.8, 0.5, 0.1)
MOCO_EPOCHS = 100
E2E_EPOCHS = 25


def _check(number, title, ok, detail=""):
    record(number, title, bool(ok), detail)
    assert ok, detail


# -- 1 ---------------------------------------------------------------------------------


def test_criterion_1_gradients():
    start = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
         "tests/test_tensor.py", "tests/test_encoder.py", "tests/test_contrastive.py",
         "-k", "finite_differences"],
        cwd=ROOT, capture_output=True, text=True,
    )
    elapsed = time.perf_counter() - start
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-500:]
    ok = proc.returncode == 0 and elapsed < 60.0
    _check(1, "layer and end-to-end gradients vs central differences", ok,
           f"{summary}; {elapsed:.1f} s of 60 s")


# -- 2 ---------------------------------------------------------------------------------


def test_criterion_2_info_nce_analytics():
    errs = []
    basis = np.eye(4)
    loss, _ = C.info_nce(basis[0], basis[0], basis[1:], 0.1)
    errs.append(abs(loss - math.log1p(3 * math.exp(-10))))
    for n in (1, 7, 63):
        basis = np.eye(n + 2)
        loss, _ = C.info_nce(basis[0], basis[1], basis[2:], 0.1)
        errs.append(abs(loss - math.log(n + 1)))
    _check(2, "InfoNCE closed forms", max(errs) < 1e-6, f"max abs error {max(errs):.2e}, tol 1e-6")


# -- 3 ---------------------------------------------------------------------------------


def test_criterion_3_momentum_and_queue():
    k = E.init_params(0)
    for v in k.values():
        v[...] = 1.0
    q = E.zeros_like_params(k)
    worst = 0.0
    for step in range(1, 1001):
        E.momentum_update(k, q, 0.999)
        expected = 0.999**step
        dev = max(float(np.max(np.abs(v.astype(np.float64) - expected))) for v in k.values())
        worst = max(worst, dev / (step * 2.0**-23))
    decay_ok = worst <= 1.0

    rng = np.random.default_rng(0)
    queue_ok = True
    for _ in range(300):
        batch = int(rng.integers(1, 65))
        size = batch * int(rng.integers(1, 17))
        state = C.MocoState({}, T_unit(rng.standard_normal((size, 8))), 0)
        history = [row.copy() for row in state.queue]
        n_batches = int(rng.integers(1, 3 * size // batch + 2))
        for _ in range(n_batches):
            keys = T_unit(rng.standard_normal((batch, 8)))
            state.enqueue(keys)
            history.extend(keys)
            queue_ok &= len(state.queue) == size and 0 <= state.ptr < size
        newest = {r.tobytes() for r in history[-size:]}
        queue_ok &= state.ptr == (n_batches * batch) % size
        queue_ok &= newest == {r.tobytes() for r in state.queue}
        queue_ok &= bool(np.all(np.abs(np.linalg.norm(state.queue, axis=1) - 1) < 1e-5))
    _check(3, "momentum decay and queue FIFO", decay_ok and queue_ok,
           f"worst decay error {worst:.2f} x step ulp bound; queue property over 300 combos {'ok' if queue_ok else 'broken'}")


def T_unit(v):
    return (v / np.linalg.norm(v, axis=1, keepdims=True)).astype(np.float32)


# -- 4 ---------------------------------------------------------------------------------


def _benchmark_seed(seed):
    labeled = generate(SynthConfig(seed=seed))
    unlabeled = generate(SynthConfig(n_recordings=500, seed=10_000 + seed, subject_prefix="u"))
    for rec in unlabeled:
        rec.step_labels = None
    x, _ = P.stack(P.prepare(unlabeled))
    moco = C.pretrain("moco", x, C.ContrastiveConfig(seed=seed, epochs=MOCO_EPOCHS)).params
    e2e = C.pretrain("e2e", x, C.ContrastiveConfig(seed=seed, epochs=E2E_EPOCHS)).params
    acc = {}
    for f in FRACTIONS:
        acc[("supervised", f)] = P.evaluate(labeled, "supervised", f, 5, seed).mean_accuracy
    for f in (0.8, 0.1):
        acc[("moco", f)] = P.evaluate(labeled, "moco", f, 5, seed, pretrained=moco).mean_accuracy
    acc[("e2e", 0.8)] = P.evaluate(labeled, "e2e", 0.8, 5, seed, pretrained=e2e).mean_accuracy
    print(f"  seed {seed}: " + ", ".join(f"{m}@{f:.1f}={a:.4f}" for (m, f), a in acc.items()), flush=True)
    return acc


def test_criterion_4_synthetic_benchmark():
    start = time.perf_counter()
    runs = [_benchmark_seed(s) for s in BENCH_SEEDS]
    elapsed = time.perf_counter() - start
    mean = {key: float(np.mean([r[key] for r in runs])) for key in runs[0]}
    for key in sorted(mean):
        print(f"  {key[0]:>10} @ {key[1]:.1f}: " + " ".join(f"{r[key]:.4f}" for r in runs) + f"  mean {mean[key]:.4f}")
    s8, s5, s1 = (mean[("supervised", f)] for f in FRACTIONS)
    a_ok = s8 >= s5 - 0.02 and s5 >= s1 - 0.02
    gap = mean[("moco", 0.1)] - s1
    b_ok = gap >= 0.05
    high = {m: mean[(m, 0.8)] for m in ("supervised", "e2e", "moco")}
    c_ok = min(high.values()) >= 0.85
    t_ok = elapsed < 30 * 60
    record(4, "(a) supervised accuracy non-increasing 0.8 > 0.5 > 0.1", a_ok, f"{s8:.4f} / {s5:.4f} / {s1:.4f}")
    record(4, "(b) MoCo beats supervised at 0.1 by >= 5 points", b_ok,
           f"{mean[('moco', 0.1)]:.4f} vs {s1:.4f}, gap {100 * gap:.1f} points")
    record(4, "(c) all methods >= 85% at 0.8", c_ok, ", ".join(f"{m} {v:.4f}" for m, v in high.items()))
    record(4, "(d) full run under 30 minutes", t_ok, f"{elapsed / 60:.1f} min")
    assert a_ok and b_ok and c_ok and t_ok


# -- 5 ---------------------------------------------------------------------------------


def test_criterion_5_noiseless_scoring():
    recs = generate(SynthConfig(noise_std_mm=0.0, seed=0))
    params, _ = P.train_supervised(P.prepare(recs), seed=0)
    matches = sum(P.score_recording(params, r)[0] == oracle_score(r) for r in recs)
    _check(5, "noiseless scores equal oracle", matches == len(recs), f"{matches}/{len(recs)}")


# -- 6 ---------------------------------------------------------------------------------


def test_criterion_6_determinism(tmp_path):
    (tmp_path / "c.toml").write_text("seed = 11\n[optim]\nepochs = 10\n[eval]\nfolds = 3\nmethods = ['supervised']\n")
    data = tmp_path / "data"
    assert cli.run(["synth", "--config", str(tmp_path / "c.toml"), "--out", str(data)]) == 0
    assert cli.run(["eval", "--config", str(data / "config.lock"), "--data", str(data),
                    "--out", str(tmp_path / "a")]) == 0
    assert cli.run(["eval", "--config", str(tmp_path / "a" / "config.lock"), "--data", str(data),
                    "--out", str(tmp_path / "b")]) == 0
    csvs = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
    same = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in csvs)
    same &= (tmp_path / "a" / "config.lock").read_bytes() == (tmp_path / "b" / "config.lock").read_bytes()

    params = E.init_params(2026)
    E.save_checkpoint(params, tmp_path / "x.ckpt", seed=2026, epoch=7, config_hash=b"h" * 32)
    back = E.read_checkpoint(tmp_path / "x.ckpt")
    bit_exact = list(back.params) == list(params) and all(back.params[n].tobytes() == params[n].tobytes()
                                                          for n in params)
    E.save_checkpoint(back.params, tmp_path / "y.ckpt", seed=2026, epoch=7, config_hash=b"h" * 32)
    bit_exact &= (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()
    _check(6, "byte-identical eval CSVs and bit-exact checkpoints", same and bit_exact,
           f"{len(csvs)} CSVs compared")


# -- 7 ---------------------------------------------------------------------------------


def _expect_line_error(fn, text, tmp_path, name):
    path = tmp_path / name
    path.write_text(text)
    try:
        fn(path)
    except FormatError as exc:
        return exc.line is not None and f"{name}:{exc.line}:" in str(exc)
    return False


def _mutate(text, rng):
    lines = text.splitlines()
    op = int(rng.integers(9))
    if op == 0 and lines:  # drop a line
        del lines[int(rng.integers(len(lines)))]
    elif op == 1 and lines:  # duplicate a line
        i = int(rng.integers(len(lines)))
        lines.insert(i, lines[i])
    elif op == 2:  # truncate
        return text[: int(rng.integers(len(text) + 1))]
    elif op == 3 and text:  # flip characters
        chars = list(text)
        for _ in range(int(rng.integers(1, 20))):
            chars[int(rng.integers(len(chars)))] = chr(int(rng.integers(32, 127)))
        return "".join(chars)
    elif op == 4 and lines:  # replace a token with a hostile value
        i = int(rng.integers(len(lines)))
        tokens = lines[i].replace(",", " , ").split(" ")
        j = int(rng.integers(len(tokens)))
        tokens[j] = str(rng.choice(["nan", "NaN", "Infinity", "-1", "1e999", "9" * 400, "", "[]", "{}", "null",
                                    "true", "\"x\"", "99999999", "0.5", "-0"]))
        lines[i] = " ".join(tokens).replace(" , ", ",")
    elif op == 5:  # random binary noise
        return bytes(rng.integers(0, 256, int(rng.integers(0, 400)), dtype=np.uint8)).decode("latin-1")
    elif op == 6 and lines:  # shuffle a block of lines
        i = int(rng.integers(len(lines)))
        block = lines[i : i + 5]
        rng.shuffle(block)
        lines[i : i + 5] = block
    elif op == 7:  # deep nesting
        lines.insert(int(rng.integers(len(lines) + 1)), "[" * 5000)
    else:  # swap two lines
        if len(lines) > 1:
            i, j = rng.integers(len(lines), size=2)
            lines[i], lines[j] = lines[j], lines[i]
    return "\n".join(lines) + "\n"


def test_criterion_7_ingestion_robustness(tmp_path):
    rec = generate(SynthConfig(n_recordings=1))[0]
    good_jsonl = format_recording_jsonl(rec)
    jl = good_jsonl.splitlines()
    wrong_count = jl[:5] + ['{"t": 0.2, "joints": [' + ", ".join(["0.0"] * 50) + "]}"] + jl[6:]
    seven = [jl[0].split('"step_labels"')[0] + '"step_labels": [true, true, true, false, false, false, true]}'] + jl[1:]
    named = [
        _expect_line_error(read_recording_jsonl, "\n".join(wrong_count), tmp_path, "a.jsonl"),
        _expect_line_error(read_recording_jsonl, "\n".join(jl[:20]), tmp_path, "b.jsonl"),
        _expect_line_error(read_recording_jsonl, "\n".join(seven), tmp_path, "c.jsonl"),
    ]
    good_ntu = ntu_text([[ramp_body(25, f)] for f in range(40)])
    ntu = good_ntu.splitlines()
    bad_coord = ntu[:6] + ["1.0 abc 2.0"] + ntu[7:]
    few_joints = ntu_text([[ramp_body(25 if f != 3 else 12, f)] for f in range(40)])
    named += [
        _expect_line_error(read_ntu_skeleton, "\n".join(bad_coord), tmp_path, "d.skeleton"),
        _expect_line_error(read_ntu_skeleton, few_joints, tmp_path, "e.skeleton"),
        _expect_line_error(read_ntu_skeleton, good_ntu[: len(good_ntu) // 3], tmp_path, "f.skeleton"),
    ]

    rng = np.random.default_rng(7)
    crashes, rejected, accepted = [], 0, 0
    for i in range(1000):
        jsonl = i % 2 == 0
        text = good_jsonl if jsonl else good_ntu
        for _ in range(int(rng.integers(1, 4))):
            text = _mutate(text, rng)
        path = tmp_path / f"fuzz{i}.{'jsonl' if jsonl else 'skeleton'}"
        path.write_bytes(text.encode("utf-8", "surrogateescape") if rng.random() < 0.9 else
                         text.encode("latin-1", "replace"))
        try:
            (read_recording_jsonl if jsonl else read_ntu_skeleton)(path)
            accepted += 1
        except FormatError:
            rejected += 1
        except Exception as exc:  # noqa: BLE001
            crashes.append(f"{path.name}: {type(exc).__name__}: {exc}")
    ok = all(named) and not crashes
    _check(7, "malformed inputs rejected with line numbers; fuzz never crashes", ok,
           f"{sum(named)}/{len(named)} line-numbered rejections; fuzz 1000 files: {rejected} rejected, "
           f"{accepted} accepted, {len(crashes)} crashes" + (f"; first: {crashes[0]}" if crashes else ""))
