import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rnnxfer.io import (
    ConfigError,
    DatasetFormatError,
    Normalizer,
    default_config,
    load_config,
    load_dataset,
    meta_path,
    parse_config,
    parse_header,
    save_dataset,
)
from rnnxfer.experiment import system_spec
from rnnxfer.metrics import UndefinedMetric, r2_index
from rnnxfer.model import Sequence
from rnnxfer.plotting import plot_predictions

from .conftest import CONFIGS


class TestR2:
    def test_examples(self):
        assert r2_index([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])[0] == 1.0
        assert r2_index([1.0, 2.0, 3.0], [2.0, 2.0, 2.0])[0] == 0.0
        # SSE 0.5 over SST 2
        assert r2_index([1.0, 2.0, 3.0], [1.5, 2.0, 2.5])[0] == pytest.approx(0.75, abs=1e-15)
        assert r2_index([0.0, 2.0], [0.4, 1.6])[0] == pytest.approx(1 - 0.32 / 2.0, abs=1e-15)

    def test_per_channel_and_average(self):
        y = np.array([[1.0, 0.0], [2.0, 1.0], [3.0, 2.0]])
        y_hat = np.array([[1.0, 1.0], [2.0, 1.0], [3.0, 1.0]])
        np.testing.assert_allclose(r2_index(y, y_hat), [1.0, 0.0])
        assert r2_index(y, y_hat, per_channel=False) == pytest.approx(0.5)

    def test_constant_channel_undefined(self):
        with pytest.raises(UndefinedMetric):
            r2_index([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    @pytest.mark.parametrize("y, y_hat", [([1.0], [1.0]), (np.zeros((3, 1)), np.zeros(3))])
    def test_invalid_shapes(self, y, y_hat):
        with pytest.raises(ValueError):
            r2_index(y, y_hat)

    @settings(max_examples=50)
    @given(y=hnp.arrays(float, st.integers(2, 50), elements=st.floats(-1e3, 1e3)),
           scale=st.floats(0.1, 10.0), shift=st.floats(-10, 10))
    def test_invariant_to_affine_rescaling(self, y, scale, shift):
        if np.ptp(y) < 1e-3:
            return
        y_hat = y + 0.1 * np.sin(np.arange(y.size)) * np.std(y)
        a = r2_index(y, y_hat)[0]
        b = r2_index(scale * y + shift, scale * y_hat + shift)[0]
        assert a <= 1.0
        assert b == pytest.approx(a, abs=1e-9)


def two_sequences():
    rng = np.random.default_rng(0)
    return [Sequence(rng.standard_normal((n, 2)), rng.standard_normal((n, 1)) * 1e-7, 1e-6, "train",
                     {"system": "rlc"}) for n in (5, 7)]


class TestDataset:
    def test_round_trip_bit_exact(self, tmp_path):
        seqs = two_sequences()
        save_dataset(tmp_path / "d.csv", seqs)
        back = load_dataset(tmp_path / "d.csv")
        assert len(back) == 2
        for a, b in zip(seqs, back):
            np.testing.assert_array_equal(a.u, b.u)
            np.testing.assert_array_equal(a.y, b.y)
            assert b.ts == 1e-6 and b.name == "train"
        assert back[1].meta["system"] == "rlc"

    @settings(max_examples=25, deadline=None)
    @given(data=hnp.arrays(float, st.tuples(st.integers(1, 20), st.integers(2, 4)),
                           elements=st.floats(allow_nan=False, allow_infinity=False, width=64)))
    def test_round_trip_property(self, tmp_path_factory, data):
        path = tmp_path_factory.mktemp("rt") / "p.csv"
        seq = Sequence(data[:, :1], data[:, 1:], 0.1, "eval")
        save_dataset(path, seq)
        (back,) = load_dataset(path)
        np.testing.assert_array_equal(back.u, seq.u)
        np.testing.assert_array_equal(back.y, seq.y)

    def test_header(self):
        assert parse_header(["k", "u0", "y0", "y1"]) == (1, 2)
        assert parse_header(["k", "u0", "u1"], require_outputs=False) == (2, 0)
        for bad in (["u0", "y0"], ["k", "y0", "u0"], ["k", "u1", "y0"], ["k", "u0"]):
            with pytest.raises(DatasetFormatError):
                parse_header(bad)

    def test_truncated_row_names_line(self, tmp_path):
        path = tmp_path / "d.csv"
        save_dataset(path, two_sequences())
        lines = path.read_text().splitlines()
        lines[3] = ",".join(lines[3].split(",")[:-1])
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match=r"d\.csv:4:"):
            load_dataset(path)

    def test_non_numeric(self, tmp_path):
        path = tmp_path / "d.csv"
        save_dataset(path, two_sequences())
        text = path.read_text().splitlines()
        text[2] = "1,abc,0,0"
        path.write_text("\n".join(text) + "\n")
        with pytest.raises(DatasetFormatError, match=":3:"):
            load_dataset(path)

    def test_metadata_mismatch(self, tmp_path):
        path = tmp_path / "d.csv"
        save_dataset(path, two_sequences())
        meta = meta_path(path)
        meta.write_text(meta.read_text().replace("lengths = 5 7", "lengths = 5 8"))
        with pytest.raises(DatasetFormatError, match="lengths"):
            load_dataset(path)

    def test_missing_sidecar(self, tmp_path):
        path = tmp_path / "d.csv"
        save_dataset(path, two_sequences())
        meta_path(path).unlink()
        with pytest.raises(FileNotFoundError, match="meta"):
            load_dataset(path)

    def test_index_must_restart(self, tmp_path):
        path = tmp_path / "d.csv"
        save_dataset(path, two_sequences())
        lines = path.read_text().splitlines()
        lines[6] = "5" + lines[6][1:]  # first row of the second sequence
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match="restart"):
            load_dataset(path)

    def test_input_only(self, tmp_path):
        path = tmp_path / "u.csv"
        save_dataset(path, Sequence(np.arange(4.0), None, 1.0, "other"))
        with pytest.raises(DatasetFormatError):
            load_dataset(path)
        (s,) = load_dataset(path, require_outputs=False)
        assert s.y is None and s.u.shape == (4, 1)


class TestNormalizer:
    def test_fit_apply_inverse(self):
        seqs = two_sequences()
        norm = Normalizer.fit(seqs)
        scaled = [norm.apply(s) for s in seqs]
        u = np.concatenate([s.u for s in scaled])
        y = np.concatenate([s.y for s in scaled])
        np.testing.assert_allclose(u.mean(0), 0, atol=1e-12)
        np.testing.assert_allclose(u.std(0), 1, rtol=1e-12)
        np.testing.assert_allclose(norm.inverse_y(scaled[0].y), seqs[0].y, rtol=1e-12)
        np.testing.assert_allclose(norm.inverse_var(np.ones(1)), norm.y_std**2)

    def test_dict_round_trip(self):
        norm = Normalizer.fit(two_sequences())
        back = Normalizer.from_dict(norm.to_dict())
        np.testing.assert_array_equal(back.y_std, norm.y_std)
        np.testing.assert_array_equal(back.u_mean, norm.u_mean)


class TestConfig:
    @pytest.mark.parametrize("name", ["rlc", "cstr"])
    def test_shipped_configs_match_defaults(self, name):
        # the shipped files spell out the perturbed parameters the defaults leave implicit
        shipped = system_spec(load_config(CONFIGS / f"{name}.cfg"))
        default = system_spec(default_config(name))
        assert shipped == default
        shipped_cfg, default_cfg = load_config(CONFIGS / f"{name}.cfg"), default_config(name)
        for section in ("model", "train", "adapt"):
            assert shipped_cfg[section] == default_cfg[section]

    def test_echo_round_trip(self):
        cfg = default_config("cstr").override("adapt", sigma2=0.1).with_seed(4)
        back = parse_config(cfg.to_text())
        assert back.to_text() == cfg.to_text()
        assert back.get("adapt", "sigma2") == 0.1
        assert back.get("system", "seed") == 4 and back.get("train", "seed") == 4

    @pytest.mark.parametrize("text", [
        "[system]\nname = rlc\nbogus = 1\n",
        "[nonsense]\nx = 1\n",
        "[train]\niterations = many\n",
        "[system]\nname = pendulum\n",
        "[adapt]\nmethod = magic\n",
        "[adapt]\ncompare_methods = jfr magic\n",
        "[model]\ncell_kind = gru\n",
    ])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_system_defaults_applied(self):
        cfg = parse_config("[system]\nname = cstr\n")
        assert cfg.get("model", "cell_kind") == "lstm"
        assert cfg.get("train", "context_len") == 25

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.cfg")


def test_plot_writes_png(tmp_path):
    t = np.arange(50) * 0.1
    y = np.sin(t)[:, None]
    path = plot_predictions(tmp_path / "fig.png", t, y, {"nominal": 0.9 * y, "jfr": y}, "demo")
    assert path.exists() and path.read_bytes()[:4] == b"\x89PNG"
