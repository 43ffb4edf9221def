import numpy as np
import pytest

from confnas.autodiff.tensor import NonFiniteError
from confnas.benchsuite import split_dataset
from confnas.trainer import (CheckpointError, ProfileError, TrialAborted, format_record, load_trial_result,
                             parse_profile, parse_profile_text, parse_record, preset, serialize_profile,
                             train_supernet, warmup_gate)
from confnas.trainer import checkpoint as ckpt
from confnas.trainer import loop
from confnas.trainer.metrics import MetricsSink, alpha_sidecar, read_alpha_sidecar
from confnas.trainer.profile import METHODS

HASH = "ab" * 32


@pytest.mark.parametrize("method", METHODS)
def test_profile_text_round_trip(method):
    p = preset(method).replace(prune_epochs=[3, 6], prune_fractions=[0.5, 0.25])
    assert parse_profile_text(serialize_profile(p)) == p


def test_profile_overlay_and_comments(tmp_path):
    text = "# comment\n[method]\nmethod=drnas\n[trainer]\nepochs=70\nbatch_size=12\n[extra]\nnote=hi\n"
    (tmp_path / "p.txt").write_text(text)
    p = parse_profile(tmp_path / "p.txt")
    assert p.sampler == "drnas" and p.epochs == 70 and p.batch_size("wide") == 12 and p.batch_size("deep") == 12
    assert p.extra == {"note": "hi"}
    with pytest.raises(ProfileError):
        parse_profile(tmp_path / "missing.txt")


@pytest.mark.parametrize("text", [
    "[trainer]\nepochs=3\n",
    "method=bogus\n",
    "method=darts\n[nowhere]\n",
    "method=darts\nfoo=1\n",
    "method=darts\n[sampler]\nepochs=3\n",
    "method=darts\nepochs=three\n",
    "method=darts\nedge_normalization=maybe\n",
    "method=darts\nepochs=3\nepochs=4\n",
    "method=darts\nwarm_epochs=100\n",
    "method=darts\nK=0\n",
    "method=darts\nseeds=\n",
    "method=darts\njust a line\n",
])
def test_profile_errors(text):
    with pytest.raises(ProfileError):
        parse_profile_text(text)


def test_desk_shrinks_warmup_but_keeps_one_epoch():
    p = preset("pcdarts").desk(4, 2, 4, 8)
    assert (p.epochs, p.warm_epochs, p.steps_per_epoch, p.channels, p.batch_size("single_cell")) == (4, 1, 2, 4, 8)
    assert preset("darts").desk(3, 1, 2, 2).warm_epochs == 0
    assert preset("darts").config_hash() != preset("darts").desk(3, 1, 2, 2).config_hash()
    with pytest.raises(ProfileError):
        preset("darts").batch_size("huge")


def test_warmup_gate():
    assert [warmup_gate(e, 2) for e in range(4)] == [True, True, False, False]
    assert not warmup_gate(0, 0)


def test_metrics_record_round_trip():
    rec = {"epoch": 3, "val_loss": 0.1 + 0.2, "ops": "a,b"}
    line = format_record(rec)
    assert line == "epoch=3 val_loss=0.30000000000000004 ops=a,b"
    parsed = parse_record(line)
    assert float(parsed["val_loss"]) == rec["val_loss"]


def test_metrics_sink_counts_failures(tmp_path):
    sink = MetricsSink(tmp_path / "nodir" / "m.log")
    sink.write("x=1")
    sink.rewrite(["x=1"])
    assert sink.failures == 2


def test_checkpoint_round_trip_and_errors(tmp_path):
    arrays = {"model": {"w": np.arange(6.0).reshape(2, 3)}}
    meta = {"state": {"epoch": 2, "name": "x"}}
    data = ckpt.encode(HASH, arrays, meta)
    h, a, m = ckpt.decode(data, HASH)
    assert h == HASH and m == meta
    np.testing.assert_array_equal(a["model"]["w"], arrays["model"]["w"])
    with pytest.raises(CheckpointError, match="magic"):
        ckpt.decode(b"X" + data[1:])
    with pytest.raises(CheckpointError, match="checksum"):
        ckpt.decode(data[:-40] + bytes([data[-40] ^ 1]) + data[-39:])
    with pytest.raises(CheckpointError, match="config hash"):
        ckpt.decode(data, "cd" * 32)
    with pytest.raises(CheckpointError):
        ckpt.decode(data[:30])
    ckpt.save(tmp_path / "c.bin", HASH, arrays, meta)
    assert ckpt.load(tmp_path / "c.bin")[2] == meta


def test_alpha_sidecar_round_trip(tmp_path):
    from confnas.samplers import init_arch_parameters
    arch = init_arch_parameters(("normal", "reduce"), 14, [f"op{i}" for i in range(8)], 4,
                                np.random.default_rng(0))
    masks = {"normal": np.ones((14, 8), dtype=bool)}
    (tmp_path / "a.txt").write_text(alpha_sidecar(arch, masks))
    back = read_alpha_sidecar(tmp_path / "a.txt")
    np.testing.assert_array_equal(back["reduce"], arch.alpha["reduce"].data.astype(np.float64))


def _profile(method="darts", **kw):
    return preset(method).desk(2, 2, 2, 4).replace(**kw)


def test_train_supernet_writes_artifacts(tmp_path, tiny_data):
    split = split_dataset(tiny_data.n_train, 0)
    res = train_supernet(_profile(), tiny_data, split, 0, tmp_path, "wide", "regular")
    assert res.epochs_completed == 2 and len(res.genotypes) == 2
    for name in ("genotype.txt", "metrics.log", "checkpoint.bin", "profile.txt", "trial.txt", "result.txt",
                 "genotype_epoch0.txt", "alpha_epoch1.txt"):
        assert (tmp_path / name).is_file(), name
    lines = (tmp_path / "metrics.log").read_text().splitlines()
    assert [parse_record(l)["epoch"] for l in lines] == ["0", "1"]
    back = load_trial_result(tmp_path)
    assert back.genotype == res.genotype and back.val_loss == res.val_loss and back.seed == 0


def test_early_stop_on_skip_count(tmp_path, tiny_data):
    split = split_dataset(tiny_data.n_train, 0)
    res = train_supernet(_profile(early_stop="skip_count", skip_threshold=-1), tiny_data, split, 0, tmp_path,
                         "single_cell", "no_skip")
    assert res.stopped_early and res.epochs_completed == 1
    assert "stopped_early=true" in (tmp_path / "result.txt").read_text()


def test_resume_rejects_other_configuration(tmp_path, tiny_data):
    split = split_dataset(tiny_data.n_train, 0)
    train_supernet(_profile(), tiny_data, split, 0, tmp_path / "a", "wide", "regular", stop_after_epoch=1)
    assert not (tmp_path / "a" / "genotype.txt").exists()
    with pytest.raises(CheckpointError):
        train_supernet(_profile(lr=0.05), tiny_data, split, 0, tmp_path / "b", "wide", "regular",
                       resume_from=tmp_path / "a" / "checkpoint.bin")


def test_nonfinite_step_aborts_trial(tmp_path, tiny_data, monkeypatch):
    def boom(*a, **k):
        raise NonFiniteError("loss is nan")
    monkeypatch.setattr(loop, "bilevel_step", boom)
    split = split_dataset(tiny_data.n_train, 0)
    with pytest.raises(TrialAborted) as info:
        train_supernet(_profile(), tiny_data, split, 0, tmp_path, "wide", "regular")
    assert info.value.epoch == 0 and "nan" in info.value.cause
    assert (tmp_path / "FAILED").is_file()


def test_diverging_learning_rate_aborts(tmp_path, tiny_data):
    split = split_dataset(tiny_data.n_train, 0)
    with pytest.raises(TrialAborted), np.errstate(all="ignore"):
        train_supernet(_profile(lr=1e30, epochs=3), tiny_data, split, 0, tmp_path, "wide", "regular")
