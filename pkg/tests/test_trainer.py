import math
import numpy as np
import pytest

import _pipeline as P
from qdbev import tensor as T
from qdbev.bevnet import STAGES, StageId
from qdbev.distill import DistillConfig, distill_losses
from qdbev.geometry import BevGrid, Camera
from qdbev.metrics import eval_task
from qdbev.quant import FULL, compute_scale
from qdbev.tensor import Tensor
from qdbev.trainer import (CURVE_HEADER, AdamW, EpochRecord, StageSchedule, TrainConfig,
                           TrainingAbort, TrainingCurve, Workspace, _run_epochs,
                           backbone_multipliers, bit_schedule, derive_seed, read_curve_csv,
                           run_phase1, run_phase2, run_qat_continuation, scene_seeds,
                           train_teacher, warmup_cosine)

SMALL = TrainConfig(seed=5, n_train=8, n_eval=4, n_objects=3, batch_size=4, teacher_epochs=3,
                    warmup_steps=2)
SCHED = StageSchedule(boundaries=(1, 2, 3, 4), p2=3)


@pytest.fixture(scope="module")
def small():
    rig = [Camera.from_yaw(y, image_size=(16, 16)) for y in (0.0, 120.0, 240.0)]
    ws = Workspace.build(rig, BevGrid(h=6, w=6), SMALL)
    teacher, curve = train_teacher(ws, SMALL)
    return ws, teacher, curve


# schedule


def test_bit_schedule_examples():
    d = StageSchedule()
    assert bit_schedule(0, d) == {s: (32, 6) for s in STAGES}
    assert bit_schedule(20, d) == {s: (4, 6) for s in STAGES}
    b5 = bit_schedule(5, d)
    assert b5[StageId.BACKBONE] == (4, 6)
    assert all(b5[s] == (32, 6) for s in STAGES[1:])
    assert [bit_schedule(10, d)[s][0] for s in STAGES] == [4, 4, 32, 32]
    assert [bit_schedule(11, d)[s][0] for s in STAGES] == [4, 4, 4, 32]
    assert bit_schedule(500, d) == bit_schedule(30, d) == {s: (4, 6) for s in STAGES}
    with pytest.raises(ValueError):
        bit_schedule(-1, d)


def test_bit_schedule_without_activation_first():
    d = StageSchedule(activation_first=False)
    assert bit_schedule(0, d) == {s: (FULL, FULL) for s in STAGES}
    assert bit_schedule(6, d)[StageId.NECK] == (4, 6)
    assert bit_schedule(6, d)[StageId.ENCODER] == (FULL, FULL)


def test_bit_schedule_monotone():
    d = StageSchedule()
    prev = set()
    for e in range(0, 40):
        cur = {s for s, (w, _) in bit_schedule(e, d).items() if w < FULL}
        assert prev <= cur
        prev = cur


def test_oneshot_schedule():
    d = StageSchedule(oneshot=True)
    assert all(bit_schedule(e, d) == {s: (4, 6) for s in STAGES} for e in (0, 3, 20))


def test_schedule_validation():
    with pytest.raises(ValueError):
        StageSchedule(boundaries=(5, 4, 10, 20))
    with pytest.raises(ValueError):
        StageSchedule(boundaries=(0, 5, 10, 20))
    with pytest.raises(ValueError):
        StageSchedule(p2=-1)


def test_derive_seed_stable_and_distinct():
    assert derive_seed(0, "qat") == derive_seed(0, "qat")
    assert len({derive_seed(0, "qat"), derive_seed(1, "qat"), derive_seed(0, "vgd")}) == 3
    assert not set(scene_seeds(0, "train", 50)) & set(scene_seeds(0, "eval", 50))


# optimizer


def test_warmup_cosine_shape():
    lrs = [warmup_cosine(s, 100, 10, 1.0) for s in range(100)]
    assert lrs[0] == pytest.approx(0.1) and lrs[9] == 1.0
    assert all(b <= a for a, b in zip(lrs[9:], lrs[10:]))
    assert warmup_cosine(100, 100, 10, 1.0) == pytest.approx(0.0, abs=1e-15)


def test_adamw_zero_grad_keeps_params():
    p = {"w": Tensor(np.arange(4.0), requires_grad=True)}
    opt = AdamW(p, 0.1, weight_decay=0.0)
    before = p["w"].data.copy()
    for _ in range(3):
        opt.zero_grad()
        opt.step()
    assert p["w"].data.tobytes() == before.tobytes()


def test_adamw_decay_is_decoupled():
    p = {"w": Tensor(np.arange(4.0), requires_grad=True)}
    opt = AdamW(p, 0.1, weight_decay=0.01)
    opt.step()
    np.testing.assert_array_equal(p["w"].data, np.arange(4.0) - 0.1 * 0.01 * np.arange(4.0))


def test_adamw_matches_torch():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(5)]
    p = {"w": Tensor(w0.copy(), requires_grad=True)}
    opt = AdamW(p, 0.01, (0.9, 0.99), weight_decay=0.05, lr_mult={"w": 0.5})
    tw = torch.nn.Parameter(torch.tensor(w0, dtype=torch.float64))
    topt = torch.optim.AdamW([tw], lr=0.005, betas=(0.9, 0.99), eps=1e-8, weight_decay=0.05)
    for g in grads:
        p["w"].grad = g
        opt.step()
        tw.grad = torch.tensor(g, dtype=torch.float64)
        topt.step()
    np.testing.assert_allclose(p["w"].data, tw.detach().numpy(), rtol=1e-12, atol=1e-14)


def test_backbone_multipliers(small):
    _, teacher, _ = small
    m = backbone_multipliers(teacher, 0.1)
    assert set(m) == set(teacher.stage_partition()[StageId.BACKBONE])


# curves


def test_curve_csv_header_and_order(tmp_path):
    c = TrainingCurve()
    bits = {s: (4, 6) for s in STAGES}
    c.append(EpochRecord(1, "phase1", bits, 0.5, 0.6))
    with pytest.raises(ValueError):
        c.append(EpochRecord(1, "phase1", bits, 0.5, 0.6))
    path = c.write_csv(tmp_path / "c" / "curve.csv")
    assert path.read_text().splitlines()[0] == ",".join(CURVE_HEADER)
    row = read_curve_csv(path)[0]
    assert row["a_bits"] == "6" and row["vgd_loss"] == "" and float(row["task_loss"]) == 0.5
    assert [p.name for p in path.parent.iterdir()] == ["curve.csv"]


# training


def test_teacher_deterministic(small):
    ws, teacher, curve = small
    again_net, again = train_teacher(ws, SMALL)
    assert curve.to_csv() == again.to_csv()
    for n in teacher.params:
        assert teacher.params[n].data.tobytes() == again_net.params[n].data.tobytes()
    assert all(r.phase == "teacher" and r.vgd_loss is None for r in curve.records)


def test_phase1_events_in_stage_order(small):
    ws, teacher, _ = small
    _, curve = run_phase1(teacher, ws, SCHED, SMALL)
    assert [s for _, s in curve.events] == list(STAGES)
    assert [e for e, _ in curve.events] == [1, 2, 3, 4]
    assert curve.column("epoch") == list(range(0, 5))
    assert curve.records[0].bits == {s: (FULL, 6) for s in STAGES}


def _on_lattice(w, raw, bits):
    s = compute_scale(np.abs(raw.reshape(raw.shape[0], -1)).max(axis=1), bits)
    m = w.reshape(w.shape[0], -1) / s[:, None]
    return np.allclose(m, np.round(m), atol=1e-9)


def test_lattice_state_entering_epoch_after_n2(small):
    ws, teacher, _ = small
    student = teacher.clone()
    n2 = SCHED.boundaries[1]
    rng = T.seeded_rng(0)
    # train through epoch N_2; the encoder switch fires at the start of N_2 + 1
    _run_epochs(student, ws, SMALL, range(0, n2 + 1), "phase1", 1e-3, {},
                lambda e: bit_schedule(e, SCHED), rng)
    for layer in student.layers:
        eff = student.effective_weight(layer)
        stage = student.layers[layer][0]
        raw = student.params[f"{layer}.weight"].data
        assert _on_lattice(eff, raw, 4) == (stage in (StageId.BACKBONE, StageId.NECK)), layer


def test_phase1_does_not_touch_teacher(small):
    ws, teacher, _ = small
    before = {n: p.data.tobytes() for n, p in teacher.params.items()}
    run_phase1(teacher, ws, SCHED, SMALL)
    assert {n: p.data.tobytes() for n, p in teacher.params.items()} == before


def test_phase2_lambda_zero_equals_continuation(small):
    ws, teacher, _ = small
    student, _ = run_phase1(teacher, ws, SCHED, SMALL)
    _, a = run_phase2(student, teacher, ws, SCHED, SMALL, DistillConfig(vgd_weight=0.0))
    _, b = run_qat_continuation(student, ws, SCHED, SMALL)
    assert a.to_csv() == b.to_csv()


def test_phase2_teacher_immutable_and_loss_composition(small):
    ws, teacher, _ = small
    student, _ = run_phase1(teacher, ws, SCHED, SMALL)
    before = {n: p.data.tobytes() for n, p in teacher.params.items()}
    ranges = {s: r.r_max.tobytes() for s, r in teacher.act_ranges.items()}
    lam = 3.0
    _, curve = run_phase2(student, teacher, ws, SCHED, SMALL, DistillConfig(vgd_weight=lam))
    assert {n: p.data.tobytes() for n, p in teacher.params.items()} == before
    assert {s: r.r_max.tobytes() for s, r in teacher.act_ranges.items()} == ranges
    assert curve.column("epoch") == [5, 6, 7]
    for r in curve.records:
        assert r.vgd_loss is not None and r.vgd_loss >= 0
        assert r.total_loss == pytest.approx(r.task_loss + lam * r.vgd_loss, rel=1e-13, abs=1e-16)


def test_identical_student_gives_zero_vgd(small):
    ws, teacher, _ = small
    x = ws.train.images[:, :2]
    tap = teacher.forward(x, ws.mask, quantize_on=False)
    assert distill_losses(tap, teacher.clone().forward(x, ws.mask), ws.mask.flat).vgd.item() == 0.0


def test_non_finite_loss_aborts(small):
    ws, teacher, _ = small
    broken = teacher.clone()
    broken.params["decoder.fc2.bias"].data[:] = np.nan
    with pytest.raises(TrainingAbort) as info:
        run_phase1(broken, ws, SCHED, SMALL)
    assert info.value.phase == "phase1" and info.value.epoch == 0
    broken.set_stage_bits(StageId.BACKBONE, 4, 6)
    with pytest.raises(TrainingAbort, match="latest quantized stage: backbone"):
        _run_epochs(broken, ws, SMALL, [1], "phase1", 1e-3, {},
                    lambda e: bit_schedule(e, SCHED), T.seeded_rng(0))


# default recipe (shared with the acceptance module through the cache)


def test_default_teacher_beats_constant_baseline():
    ws = P.workspace(0)
    _, curve = P.teacher(0)
    rate = ws.train.truth.mean()
    baseline = -(rate * math.log(rate) + (1 - rate) * math.log(1 - rate))
    assert curve.final.task_loss < baseline
    assert curve.final.eval_metric < baseline


def test_default_teacher_accuracy():
    ws = P.workspace(0)
    net, _ = P.teacher(0)
    assert eval_task(net, ws.eval, ws.mask, quantize_on=False).accuracy > 0.9


def test_default_progressive_not_worse_than_oneshot():
    _, prog = P.phase1(0, False)
    _, one = P.phase1(0, True)
    assert len(prog.records) == len(one.records)
    assert prog.final.task_loss <= one.final.task_loss
