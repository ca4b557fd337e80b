import gzip
import json
import math
import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mssa_lab.core import Trajectory
from mssa_lab.expcli import cli
from mssa_lab.expcli.config import ConfigError, RunConfig, load_config, load_preset, parse_config, preset_names
from mssa_lab.expcli.idx import IDXFormatError, load_idx, read_idx_images, read_idx_labels
from mssa_lab.expcli.io import aggregate, emit_csv, emit_plot, format_value, read_csv
from mssa_lab.expcli.runner import LOCK_NAME, MANIFEST, OUT_ENV, LockError, resolve_out_dir, run_experiment

# csv -------------------------------------------------------------------------


def test_single_row_csv_layout(tmp_path):
    path = emit_csv({"k": [1], "err": [0.1]}, tmp_path / "one.csv")
    raw = path.read_bytes()
    assert raw == b"k,err\n1,0.10000000000000001\n"
    assert b"\r" not in raw


def test_trajectory_csv(tmp_path):
    traj = Trajectory(columns={"k": [5, 10], "v_sq": [1.5, 0.25]})
    out = read_csv(emit_csv(traj, tmp_path / "t.csv"))
    assert list(out) == ["k", "v_sq"]
    assert out["v_sq"].tolist() == [1.5, 0.25]


@settings(max_examples=200)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_format_round_trips_exactly(v):
    assert float(format_value(v)) == v


def test_csv_round_trip_file(tmp_path):
    vals = np.random.default_rng(0).standard_normal(50) * 10.0 ** np.arange(-25, 25)
    out = read_csv(emit_csv({"k": list(range(50)), "x": list(vals)}, tmp_path / "r.csv"))
    assert np.array_equal(out["x"], vals)


def test_csv_length_mismatch(tmp_path):
    with pytest.raises(ValueError):
        emit_csv({"k": [1, 2], "x": [1.0]}, tmp_path / "bad.csv")
    assert not (tmp_path / "bad.csv").exists()


def test_aggregate_mean_matches_recomputation():
    rng = np.random.default_rng(4)
    runs = [{"k": [1, 2, 3, 4], "e": list(rng.random(4))} for _ in range(7)]
    agg = aggregate(runs)
    for j in rng.choice(4, 3, replace=False):
        col = [r["e"][j] for r in runs]
        assert agg["e_mean"][j] == math.fsum(col) / 7
        # ddof=1 standard error by hand
        m = sum(col) / 7
        se = math.sqrt(sum((c - m) ** 2 for c in col) / 6) / math.sqrt(7)
        assert agg["e_stderr"][j] == pytest.approx(se, rel=1e-12)
    # seed order does not change the mean
    assert aggregate(runs[::-1])["e_mean"] == agg["e_mean"]


def test_aggregate_rejects_mismatched_keys():
    with pytest.raises(ValueError):
        aggregate([{"k": [1, 2], "e": [0, 0]}, {"k": [1, 3], "e": [0, 0]}])
    with pytest.raises(ValueError):
        aggregate([])


# plots -----------------------------------------------------------------------


def test_empty_plot_raises_without_writing(tmp_path):
    path = tmp_path / "p.svg"
    with pytest.raises(ValueError, match="empty"):
        emit_plot({"K": [], "err": []}, "loglog-rate", path)
    assert not path.exists()


def test_rate_plot_annotates_slope(tmp_path):
    K = [2.0**j for j in range(7, 14)]
    path = emit_plot({"K": K, "err": [k**-1.0 for k in K]}, "loglog-rate", tmp_path / "r.svg")
    text = path.read_text()
    assert "slope = -1.000" in text
    assert text.count("<polyline") == 1


def test_loss_curve_one_line_per_series(tmp_path):
    data = {"k": [1, 2, 3], "ST": [3.0, 2.0, 1.0], "TT": [3.0, 2.5, 2.0]}
    text = emit_plot(data, "loss-curve", tmp_path / "l.svg", title="a & b").read_text()
    assert text.count("<polyline") == 2
    assert "a &amp; b" in text


def test_plot_rejects_unknown_kind(tmp_path):
    with pytest.raises(ValueError):
        emit_plot({"k": [1], "x": [1.0]}, "bar", tmp_path / "x.svg")


# idx -------------------------------------------------------------------------


def write_images(path, pixels, n=None):
    pixels = np.asarray(pixels, dtype=np.uint8)
    n = pixels.shape[0] if n is None else n
    blob = struct.pack(">IIII", 0x803, n, pixels.shape[1], pixels.shape[2]) + pixels.tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(blob)
    return path


def write_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    path.write_bytes(struct.pack(">II", 0x801, len(labels)) + labels.tobytes())
    return path


PIX = [[[0, 51], [102, 255]], [[255, 0], [0, 17]]]


@pytest.mark.parametrize("name", ["img.idx", "img.idx.gz"])
def test_idx_hand_fixture(tmp_path, name):
    img = read_idx_images(write_images(tmp_path / name, PIX))
    assert img.shape == (2, 2, 2)
    assert np.array_equal(img, np.array(PIX) / 255.0)
    lab = read_idx_labels(write_labels(tmp_path / "lab.idx", [3, 7]))
    assert lab.dtype == np.int64 and lab.tolist() == [3, 7]


def test_idx_bad_magic(tmp_path):
    path = tmp_path / "bad.idx"
    path.write_bytes(struct.pack(">IIII", 0x801, 1, 1, 1) + b"\x00")
    with pytest.raises(IDXFormatError, match="bad magic .* at offset 0"):
        read_idx_images(path)


def test_idx_count_mismatch(tmp_path):
    img = write_images(tmp_path / "i.idx", PIX)
    lab = write_labels(tmp_path / "l.idx", [1, 2, 3])
    with pytest.raises(IDXFormatError) as info:
        load_idx(img, lab)
    assert "2 images" in str(info.value) and "3 labels" in str(info.value)


def test_idx_truncation_names_offset(tmp_path):
    short = tmp_path / "short.idx"
    short.write_bytes(struct.pack(">II", 0x803, 2))
    with pytest.raises(IDXFormatError, match="truncated header at offset 8"):
        read_idx_images(short)
    cut = write_images(tmp_path / "cut.idx", PIX, n=3)
    with pytest.raises(IDXFormatError, match="truncated payload at offset 24"):
        read_idx_images(cut)


# config ----------------------------------------------------------------------


def rates_raw(out, **kw):
    raw = {
        "kind": "verify-rates",
        "instance": {"name": "strongly-monotone", "sigma": 0.1},
        "horizons": {"grid": [64, 128, 256, 512]},
        "seeds": {"count": 2},
        "output": {"dir": str(out)},
    }
    raw.update(kw)
    return raw


def test_config_rejects_bad_tables(tmp_path):
    with pytest.raises(ConfigError, match="seed list is empty"):
        parse_config(rates_raw(tmp_path, seeds={"list": []}))
    with pytest.raises(ConfigError, match="distinct"):
        parse_config(rates_raw(tmp_path, seeds={"list": [1, 1]}))
    with pytest.raises(ConfigError, match="increasing"):
        parse_config(rates_raw(tmp_path, horizons={"grid": [100, 100]}))
    with pytest.raises(ConfigError, match="kind"):
        parse_config(rates_raw(tmp_path, kind="nope"))
    with pytest.raises(ConfigError, match="unknown top-level"):
        parse_config(rates_raw(tmp_path, extra=1))
    with pytest.raises(ConfigError, match="record_stride"):
        parse_config(rates_raw(tmp_path, output={"record_stride": 0}))


def test_horizon_forms():
    assert parse_config({"kind": "soba", "horizons": {"K": 50}}).horizons == (50,)
    assert parse_config({"kind": "verify-rates", "horizons": {"lo_exp": 2, "hi_exp": 4}}).horizons == (4, 8, 16)
    assert parse_config({"kind": "verify-rates", "horizons": {"lo_exp": 1, "hi_exp": 2, "base": 10}}).horizons == (10, 100)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("kind = [\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_instance_file_merge(tmp_path):
    (tmp_path / "inst.toml").write_text('[instance]\nname = "primitive"\nsigma = 0.5\n')
    (tmp_path / "run.toml").write_text('kind = "verify-rates"\n[instance]\nfile = "inst.toml"\nsigma = 0.2\n'
                                       '[horizons]\ngrid = [8, 16]\n[output]\ndir = "out"\n')
    cfg = load_config(tmp_path / "run.toml")
    assert cfg.instance == {"name": "primitive", "sigma": 0.2}
    assert cfg.out_dir == tmp_path / "out"


def test_overrides_and_hash(tmp_path):
    cfg = parse_config(rates_raw(tmp_path))
    moved = cfg.with_overrides(out_dir=tmp_path / "elsewhere")
    assert moved.config_hash() == cfg.config_hash()
    more = cfg.with_overrides(n_seeds=5)
    assert more.seeds == (0, 1, 2, 3, 4) and more.config_hash() != cfg.config_hash()
    assert cfg.with_overrides(paper_scale=True).paper_scale
    with pytest.raises(ConfigError):
        cfg.with_overrides(n_seeds=0)


def test_presets_load():
    names = preset_names()
    assert {"rates-strongly-monotone", "rates-primitive", "soba-st", "soba-tt", "svm-k1"} <= set(names)
    for name in names:
        cfg = load_preset(name)
        assert cfg.out_dir is None and cfg.seeds
    sm = load_preset("rates-strongly-monotone")
    assert sm.horizons == tuple(2**j for j in range(7, 14)) and len(sm.seeds) == 20
    with pytest.raises(ConfigError, match="unknown preset"):
        load_preset("nope")


# runs ------------------------------------------------------------------------


def test_rates_run_is_reproducible(tmp_path):
    cfg = parse_config(rates_raw(tmp_path / "a"))
    first = run_experiment(cfg)
    assert first.ok
    agg1 = (first.out_dir / "aggregate.csv").read_bytes()
    fit = json.loads((first.out_dir / "ratefit.json").read_text())
    assert "slope" in fit
    again = run_experiment(cfg)
    assert (again.out_dir / "aggregate.csv").read_bytes() == agg1
    other = run_experiment(cfg.with_overrides(out_dir=tmp_path / "b"))
    assert (other.out_dir / "aggregate.csv").read_bytes() == agg1


def test_manifest_lists_every_file(tmp_path):
    res = run_experiment(parse_config(rates_raw(tmp_path)))
    on_disk = {p.relative_to(tmp_path).as_posix() for p in tmp_path.rglob("*") if p.is_file()}
    manifest = json.loads((tmp_path / MANIFEST).read_text())
    assert set(manifest["files"]) == on_disk == set(res.files)
    assert manifest["status"] == "ok" and manifest["config_hash"] == res.manifest["config_hash"]
    assert not (tmp_path / LOCK_NAME).exists()


def test_lock_blocks_second_writer(tmp_path):
    tmp_path.joinpath(LOCK_NAME).write_text("123")
    with pytest.raises(LockError):
        run_experiment(parse_config(rates_raw(tmp_path)))
    assert cli.main(["verify-rates", "--preset", "rates-strongly-monotone", "--out", str(tmp_path)]) == 2


def test_foreign_files_are_not_clobbered(tmp_path):
    (tmp_path / "notes.txt").write_text("mine")
    with pytest.raises(ConfigError, match="no known run"):
        run_experiment(parse_config(rates_raw(tmp_path)))
    assert (tmp_path / "notes.txt").read_text() == "mine"


def test_validation_before_compute(tmp_path):
    cfg = parse_config(rates_raw(tmp_path / "x"))
    with pytest.raises(ConfigError, match="seed list is empty"):
        run_experiment(replace(cfg, seeds=()))
    with pytest.raises(ConfigError, match="two horizons"):
        run_experiment(replace(cfg, horizons=(64,)))
    with pytest.raises(ConfigError, match="single horizon"):
        run_experiment(replace(cfg, kind="soba"))
    with pytest.raises(ConfigError, match="rates"):
        run_experiment(replace(cfg, kind="distlearn", horizons=(10,), schedule={"rates": [0.0]}))
    assert not (tmp_path / "x").exists()


def test_default_out_dir_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path))
    cfg = replace(parse_config(rates_raw(tmp_path)), out_dir=None)
    out = resolve_out_dir(cfg)
    assert out.parent == tmp_path and out.name == f"verify-rates-{cfg.config_hash()[:12]}"


def test_small_soba_and_distlearn_runs(tmp_path):
    soba = parse_config({
        "kind": "soba",
        "instance": {"problem": "quadratic", "dim_x": 3, "dim_y": 3},
        "schedule": {"variant": ["ST", "TT"], "alpha_scale": 0.5, "beta_scale": 0.5, "batch_size": 1},
        "horizons": {"K": 200},
        "seeds": {"count": 2},
        "output": {"dir": str(tmp_path / "s"), "record_stride": 50},
    })
    res = run_experiment(soba)
    assert res.ok and {"ST/aggregate.csv", "TT/aggregate.csv"} <= set(res.files)
    dist = parse_config({
        "kind": "distlearn",
        "instance": {"d": 5, "N": 2, "M": 30},
        "schedule": {"rates": [1.0, 0.5]},
        "horizons": {"K": 100},
        "seeds": {"count": 2},
        "output": {"dir": str(tmp_path / "d"), "record_stride": 25, "emit_plots": False},
    })
    res = run_experiment(dist)
    assert res.ok and "p-0.5/aggregate.csv" in res.files
    assert not any(f.endswith(".svg") for f in res.files)
    assert res.manifest["summary"]["p-1"]["comm_coords_per_round_node"] == 6.0


def test_check_assumptions_run(tmp_path):
    cfg = parse_config({"kind": "check-assumptions", "instance": {"n_pairs": 200, "n_samples": 2000},
                        "output": {"dir": str(tmp_path)}})
    res = run_experiment(cfg)
    assert res.ok and res.manifest["summary"]["passed"]


def test_cli_exit_codes(tmp_path, capsys):
    conf = tmp_path / "r.toml"
    conf.write_text('kind = "verify-rates"\n[horizons]\ngrid = [32, 64, 128, 256]\n[seeds]\ncount = 2\n')
    assert cli.main(["verify-rates", "--config", str(conf), "--out", str(tmp_path / "o"), "--no-plots"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == f"ok: {tmp_path / 'o'}"
    assert "slope" in json.loads(out[1])
    assert cli.main(["soba", "--config", str(conf)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "usage"
    assert cli.main(["verify-rates", "--config", str(tmp_path / "none.toml")]) == 2
    assert cli.main(["presets"]) == 0
    assert "svm-k1\tdistlearn" in capsys.readouterr().out
