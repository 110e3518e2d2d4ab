"""Acceptance criteria 1-9, each reported as one PASS/FAIL line in the summary.

Criteria 2, 3 and 6-8 share one desk-scale benchmark on toy-64: 2000 training
pairs (seed 0), a held-out 500-image test set (seed 1) and a 200-box detection
set (seed 2), all over 10 classes, trained with the default config.
"""

import hashlib
import math
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES, USER_MODEL_CACHE_DIR
from defense_prefix.attack_forge import (AttackRecord, DetectionRecord, ImageRecord, hash64,
                                         read_manifest, synth_classification_attack,
                                         synth_detection_attack, write_manifest)
from defense_prefix.errors import CompatibilityError, ModelLoadError
from defense_prefix.eval_bench import BenchData, ablate, accuracy_report, encode_classification_manifest
from defense_prefix.gateway import PromptTemplate, load_model
from defense_prefix.prefix_core import (DefensePrefixVector, TrainingConfig, build_class_features,
                                        check_compatible, defense_loss, dp_objective, identity_loss,
                                        init_prefix, load_dp, paired_features, save_dp, train_dp)
from defense_prefix.pretrained import ALIASES, resolve_checkpoint
from defense_prefix.region_eval import eval_regions_gt
from defense_prefix.templates import DEFAULT_PROMPT, TRAINING_TEMPLATES
from defense_prefix.toy import TOY_NOUNS, render_concept
from defense_prefix.toybench import build_classification_bench, build_detection_bench

MODEL = "toy-64"


def verdict(n, title, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed < budget
    status = "PASS" if ok else "FAIL"
    ACCEPTANCE_LINES.append(f"criterion {n} [{status}] {title}: {detail} "
                            f"({elapsed:.1f}s of {budget:.0f}s budget)")
    assert ok, f"criterion {n}: {detail} ({elapsed:.1f}s, budget {budget}s)"


def pts(acc):
    return 100.0 * acc


# -- shared desk-scale benchmark ------------------------------------------------------

@pytest.fixture(scope="module")
def replication(tmp_path_factory):
    root = tmp_path_factory.mktemp("replication")
    t0 = time.perf_counter()
    h = load_model(MODEL)
    train = build_classification_bench(root / "train", 2000, 10, seed=0)
    test = build_classification_bench(root / "test", 500, 10, seed=1)
    detection = build_detection_bench(root / "detection", 200, 10, seed=2)
    t_build = time.perf_counter() - t0

    t0 = time.perf_counter()
    before = {k: v.clone() for k, v in h.named_state().items()}
    data = BenchData(list(train.classes),
                     paired_features(h, train.clean_manifest, train.attack_manifest, 10),
                     encode_classification_manifest(h, test.clean_manifest, 10),
                     encode_classification_manifest(h, test.attack_manifest, 10))
    t_encode = time.perf_counter() - t0

    cfg = TrainingConfig()
    t0 = time.perf_counter()
    dp = train_dp(h, None, None, train.classes, cfg, features=data.train)
    t_train = time.perf_counter() - t0
    after = {k: v.clone() for k, v in h.named_state().items()}
    return dict(h=h, root=root, train=train, test=test, detection=detection, data=data, cfg=cfg, dp=dp,
                before=before, after=after, t_build=t_build, t_encode=t_encode, t_train=t_train)


# -- 1 --------------------------------------------------------------------------------

def _ce_oracle(p, y):
    return -math.log(p[y])


def _kl_oracle(p, q):
    return sum(a * (math.log(a) - math.log(b)) for a, b in zip(p, q) if a > 0)


def test_criterion_1_loss_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, problems = 0.0, []
    for i in range(1000):
        n = int(rng.integers(2, 60))
        p1 = np.exp(rng.uniform(-1, 1, n) * rng.uniform(0.1, 10))
        if i % 4 == 0:
            p1[rng.random(n) < 0.3] = 0.0  # exact zeros exercise 0 log 0 = 0
            if p1.sum() == 0:
                p1[0] = 1.0
        p1 /= p1.sum()
        p2 = np.exp(rng.uniform(-1, 1, n) * rng.uniform(0.1, 10))
        p2 /= p2.sum()
        y = int(rng.integers(n))
        t1, t2 = torch.tensor(p1), torch.tensor(p2)

        ce = float(defense_loss(t2, y))
        kl = float(identity_loss(t1, t2))
        self_kl = float(identity_loss(t2, t2))
        one_hot = torch.zeros(n, dtype=torch.float64)
        one_hot[y] = 1.0
        ce_one_hot = float(defense_loss(one_hot, y))

        errs = [abs(ce - _ce_oracle(p2, y)), abs(kl - _kl_oracle(p1, p2)), abs(self_kl), abs(ce_one_hot)]
        worst = max(worst, *errs)
        if max(errs) > 1e-6 or kl < 0:
            problems.append(i)
    detail = f"worst abs error {worst:.2e} over 1000 distributions, {len(problems)} violations"
    verdict(1, "loss oracles", not problems, detail, time.perf_counter() - t0, 60)


# -- 2 --------------------------------------------------------------------------------

def test_criterion_2_gradient_check(replication):
    """Central differences (h=1e-3) against autograd, coordinate-wise, on 20 batches.

    Batches, templates and initial prefixes are drawn from seeds fixed in
    advance. The vector-level error is reported alongside for diagnosis.
    """
    h, data, cfg = replication["h"], replication["data"], replication["cfg"]
    t0 = time.perf_counter()
    step = 1e-3
    eye = torch.eye(h.d, dtype=h.dtype)
    worst_coord, worst_vec, failing = [], 0.0, []
    for b in range(20):
        rng = np.random.default_rng(1000 + b)
        idx = torch.from_numpy(rng.choice(len(data.train.labels), cfg.batch_size, replace=False))
        template = TRAINING_TEMPLATES[rng.integers(len(TRAINING_TEMPLATES))]
        xc, xa, y = data.train.clean[idx], data.train.attack[idx], data.train.labels[idx]

        def f(v):
            return dp_objective(h, v, data.class_names, template, xc, xa, y, cfg)[0]

        dp = init_prefix(h, TrainingConfig(seed=b)).requires_grad_(True)
        f(dp).backward()
        analytic = dp.grad[0]
        with torch.no_grad():
            fd = torch.stack([(f(dp + step * eye[i:i + 1]) - f(dp - step * eye[i:i + 1])) / (2 * step)
                              for i in range(h.d)])
        rel = (analytic - fd).abs() / torch.maximum(analytic.abs(), fd.abs())
        worst_coord.append(float(rel.max()))
        worst_vec = max(worst_vec, float((analytic - fd).norm() / analytic.norm()))
        if worst_coord[-1] >= 1e-4:
            i = int(rel.argmax())
            failing.append(f"batch {b} coord {i} rel {worst_coord[-1]:.1e} "
                           f"(|g_i|/max|g| = {float(analytic[i].abs() / analytic.abs().max()):.1e})")
    detail = (f"worst coordinate rel error {max(worst_coord):.2e}, "
              f"{20 - len(failing)}/20 batches below 1e-4, worst vector rel error {worst_vec:.1e}")
    if failing:
        detail += "; failing: " + "; ".join(failing)
    verdict(2, "finite-difference gradient", not failing, detail, time.perf_counter() - t0, 300)


# -- 3 --------------------------------------------------------------------------------

def test_criterion_3_frozen(replication):
    before, after = replication["before"], replication["after"]
    changed = [k for k in before if not torch.equal(before[k], after[k])]
    same_keys = before.keys() == after.keys()
    init = init_prefix(replication["h"], replication["cfg"]).to(torch.float32)
    moved = float((replication["dp"].values - init).abs().max())
    ok = same_keys and not changed and moved > 0
    detail = (f"{len(before)} state tensors bitwise identical after training, changed={changed}; "
              f"prefix moved by max {moved:.3e}")
    verdict(3, "frozen encoders", ok, detail, replication["t_encode"] + replication["t_train"], 300)


# -- 4 --------------------------------------------------------------------------------

def _path_gap(h, names, templates):
    gap = 0.0
    exact = True
    for t in templates:
        bank = build_class_features(h, names, t).features
        native = torch.stack([h.encode_text(PromptTemplate(t).fill(n)) for n in names]).to(bank.dtype)
        exact &= torch.equal(bank, native)
        gap = max(gap, float((bank - native).abs().max()))
    return exact, gap


def _real_checkpoint():
    if not USER_MODEL_CACHE_DIR:
        return None
    for name in ALIASES.values():
        try:
            return resolve_checkpoint(str(Path(USER_MODEL_CACHE_DIR) / name))
        except ModelLoadError:
            continue
    return None


def test_criterion_4_path_equivalence(toy16, toy64, tiny_clip):
    t0 = time.perf_counter()
    names = list(TOY_NOUNS) + ["great white shark", "unseen thing"]
    templates = [DEFAULT_PROMPT, *TRAINING_TEMPLATES]
    toy_exact = all(_path_gap(h, names, templates)[0] for h in (toy16, toy64))
    _, tiny_gap = _path_gap(tiny_clip, ["dog", "cat", "great white shark"], templates[:20])
    ok = toy_exact and tiny_gap <= 1e-5
    detail = f"toy-16/toy-64 exact={toy_exact} over {len(templates)} templates; tiny CLIP max-abs {tiny_gap:.1e}"
    ckpt = _real_checkpoint()
    if ckpt is not None:
        real = load_model(str(ckpt), "pretrained")
        _, real_gap = _path_gap(real, ["dog", "cat", "great white shark"], templates[:20])
        ok = ok and real_gap <= 1e-5
        detail += f"; {ckpt.name} max-abs {real_gap:.1e}"
    else:
        detail += "; no real checkpoint under MODEL_CACHE_DIR, pretrained check used the tiny CLIP only"
    verdict(4, "path equivalence", ok, detail, time.perf_counter() - t0, 600)


# -- 5 --------------------------------------------------------------------------------

def _classification_run(sources, classes, n):
    digests, records, ink_violations = [], [], 0
    for i in range(n):
        src, true_class = sources[i % len(sources)]
        img, rec = synth_classification_attack(src, true_class, classes, hash64(0, f"acceptance:{i}"))
        a = np.asarray(img, dtype=np.int16)
        diff = np.abs(a - np.asarray(src, dtype=np.int16)).sum(-1)
        ys, xs = np.nonzero(diff)
        x0, y0, x1, y1 = rec.footprint_box
        W, H = img.size
        inside = 0 <= x0 and 0 <= y0 and x1 <= W and y1 <= H
        if len(xs):
            inside &= xs.min() >= x0 and xs.max() < x1 and ys.min() >= y0 and ys.max() < y1
        ink_violations += not inside
        digests.append(hashlib.sha256(img.tobytes()).hexdigest())
        records.append(rec)
    return digests, records, ink_violations


def test_criterion_5_attack_synthesis(replication):
    from scipy.stats import chisquare

    t0 = time.perf_counter()
    classes = list(replication["train"].classes)
    sources = [(render_concept(classes[k], np.random.default_rng(500 + j)), k)
               for j in range(5) for k in range(len(classes))]
    digests, records, ink_violations = _classification_run(sources, classes, 10_000)
    injections = sum(r.attack_class == r.true_class or r.text == classes[r.true_class] for r in records)
    sizes = np.array([r.size_pt for r in records])
    counts = np.bincount(sizes - 20, minlength=21)
    in_range = sizes.min() >= 20 and sizes.max() <= 40 and len(counts) == 21
    p_value = float(chisquare(counts).pvalue)
    again, again_records, _ = _classification_run(sources, classes, 10_000)
    identical = again == digests and again_records == records

    # Detection: the 200-box benchmark plus 2000 random boxes of all sizes.
    attacks = list(read_manifest(replication["detection"].attack_records))
    rng = np.random.default_rng(7)
    canvas = render_concept("dog", rng).resize((448, 448))
    for s in range(400):
        boxes = []
        for _ in range(5):
            w, hh = int(rng.integers(8, 440)), int(rng.integers(8, 440))
            x, y = int(rng.integers(0, 448 - w + 1)), int(rng.integers(0, 448 - hh + 1))
            boxes.append((int(rng.integers(10)), x, y, x + w, y + hh))
        attacks += synth_detection_attack(canvas, boxes, classes, s)[1]
    placed = [a for a in attacks if not a.skipped]
    too_wide = [a for a in placed if not (a.footprint_box[2] - a.footprint_box[0]) < 0.8 * (a.box[2] - a.box[0])]
    outside = [a for a in placed if not (a.box[0] <= a.footprint_box[0] and a.box[1] <= a.footprint_box[1]
                                         and a.footprint_box[2] <= a.box[2] and a.footprint_box[3] <= a.box[3])]

    ok = (injections == 0 and ink_violations == 0 and in_range and p_value > 0.001 and identical
          and not too_wide and not outside)
    detail = (f"10000 records: {injections} true-label injections, {ink_violations} ink outside bounds, "
              f"size chi-square p={p_value:.3f}, regeneration identical={identical}; "
              f"detection {len(placed)}/{len(attacks)} boxes attacked, {len(too_wide)} with width >= 0.8 box, "
              f"{len(outside)} outside box")
    verdict(5, "attack synthesis", ok, detail, time.perf_counter() - t0, 600)


# -- 6 --------------------------------------------------------------------------------

def _four_way(h, data, dp, names):
    xc, yc, dc = data.eval_clean
    xa, ya, da = data.eval_attacked
    out = {}
    for cond, use in (("baseline", None), ("dp", dp)):
        out[cond] = (accuracy_report(h, xc, yc, names, DEFAULT_PROMPT, use, data_digest_=dc).accuracy,
                     accuracy_report(h, xa, ya, names, DEFAULT_PROMPT, use, data_digest_=da).accuracy)
    return out


def test_criterion_6_replication(replication):
    r = replication
    t0 = time.perf_counter()
    acc = _four_way(r["h"], r["data"], r["dp"], r["data"].class_names)
    (bc, ba), (dc, da) = acc["baseline"], acc["dp"]
    a = pts(bc - ba) >= 5
    b = pts(da - ba) >= 5
    c = abs(pts(dc - bc)) <= 2
    elapsed = r["t_build"] + r["t_encode"] + r["t_train"] + time.perf_counter() - t0
    detail = (f"clean {pts(bc):.1f} -> {pts(dc):.1f}, attacked {pts(ba):.1f} -> {pts(da):.1f} "
              f"(a: attack costs {pts(bc - ba):.1f} pts {a}; b: prefix gains {pts(da - ba):.1f} pts {b}; "
              f"c: clean change {pts(dc - bc):+.1f} pts {c})")
    verdict(6, "desk-scale replication", a and b and c, detail, elapsed, 1800)


# -- 7 --------------------------------------------------------------------------------

def _well_formed(result, n):
    rows = result.csv().strip().splitlines()
    table = result.table().splitlines()
    return (len(result.rows) == n and len(rows) == n + 1 and len(table) == n + 3
            and all(0 <= x.clean.accuracy <= 1 and 0 <= x.attacked.accuracy <= 1 for x in result.rows))


def test_criterion_7_ablations(replication):
    r = replication
    t0 = time.perf_counter()
    positions = ablate(r["h"], r["data"], r["cfg"], "position", ["beginning", "before_class", "end"])
    lambdas = ablate(r["h"], r["data"], r["cfg"], "lambda", [2.0, 2.5, 3.0, 3.5, 4.0])
    formed = _well_formed(positions, 3) and _well_formed(lambdas, 5)
    by_pos = {row.value: pts(row.attacked.accuracy) for row in positions.rows}
    best = all(by_pos["before_class"] >= v - 1 for v in by_pos.values())
    lam = ", ".join(f"{row.value:g}: {pts(row.attacked.accuracy):.1f}" for row in lambdas.rows)
    detail = (f"tables well-formed={formed}; attacked by position "
              + ", ".join(f"{k} {v:.1f}" for k, v in by_pos.items())
              + f"; attacked by lambda {lam}")
    verdict(7, "ablation harness", formed and best, detail, time.perf_counter() - t0, 7200)


# -- 8 --------------------------------------------------------------------------------

def test_criterion_8_regions(replication):
    r = replication
    t0 = time.perf_counter()
    det, names, dp = r["detection"], r["data"].class_names, r["dp"]
    acc = {}
    for cond, use in (("baseline", None), ("dp", dp)):
        acc[cond] = tuple(eval_regions_gt(r["h"], m, names, DEFAULT_PROMPT, use)
                          for m in (det.clean_manifest, det.attack_manifest))
    (bc, ba), (dc, da) = ([x.accuracy for x in acc[k]] for k in ("baseline", "dp"))
    n = acc["baseline"][0].n_images
    gain = pts(da - ba) >= 5
    clean = abs(pts(dc - bc)) <= 2
    detail = (f"{n} boxes: clean {pts(bc):.1f} -> {pts(dc):.1f}, attacked {pts(ba):.1f} -> {pts(da):.1f} "
              f"(gain {pts(da - ba):.1f} pts {gain}; clean change {pts(dc - bc):+.1f} pts {clean})")
    verdict(8, "region portability", gain and clean and n == 200, detail, time.perf_counter() - t0, 1200)


# -- 9 --------------------------------------------------------------------------------

def test_criterion_9_serialization(toy16, toy64, tmp_path):
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    dp = DefensePrefixVector(torch.randn(2, 64, generator=g), "toy-64", "templates", "digest")
    save_dp(dp, tmp_path / "dp.bin")
    back = load_dp(tmp_path / "dp.bin")
    bitwise = (back.values.numpy().tobytes() == dp.values.numpy().tobytes()
               and (back.model_id, back.template_set_hash, back.training_config_digest)
               == (dp.model_id, dp.template_set_hash, dp.training_config_digest))
    save_dp(back, tmp_path / "again.bin")
    bitwise &= (tmp_path / "dp.bin").read_bytes() == (tmp_path / "again.bin").read_bytes()

    img = tmp_path / "a.png"
    records = [ImageRecord(str(img), 1), DetectionRecord(str(img), [(0, 1, 2, 30, 40), (2, 5, 5, 9, 9)]),
               AttackRecord(str(img), str(img), 1, 2, "bird", 17, "roman", 25, "red", "blue", 3, 4, 50, 20),
               AttackRecord(str(img), str(img), 0, 1, "cat", 5, "DejaVuSans", 0, "red", "blue", 0, 0, 0, 0,
                            (1, 2, 3, 4), skipped=True)]
    write_manifest(records, tmp_path / "m.jsonl", ["dog", "cat", "bird"])
    loaded = read_manifest(tmp_path / "m.jsonl")
    structural = list(loaded) == records and loaded.classes == ["dog", "cat", "bird"]

    refused = []
    other = DefensePrefixVector(torch.zeros(1, 64), "toy-64-other")
    try:
        check_compatible(other, toy64)
        refused.append(False)
    except CompatibilityError:
        refused.append(True)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        overridden = check_compatible(other, toy64, allow_model_mismatch=True) is other and bool(caught)
    try:
        check_compatible(dp, toy16, allow_model_mismatch=True)
        refused.append(False)
    except CompatibilityError:
        refused.append(True)
    cross = all(refused) and overridden
    detail = f"dp bitwise round trip={bitwise}; manifest round trip={structural}; cross-model refused={cross}"
    verdict(9, "serialization", bitwise and structural and cross, detail, time.perf_counter() - t0, 60)
