"""Config round-trips, network construction, the training driver, overfit
detection, checkpoints, and the CLI surface. Everything here runs at tiny
scale; the desk-scale experiments live in the acceptance module."""

import copy
import json

import numpy as np
import pytest

from naslab.config import ExperimentConfig, load_config, save_config
from naslab.data import load_cifar_binary
from naslab.errors import (ConfigurationError, DataError,
                           InsufficientDataError)
from naslab.harness import (build_network, detect_overfit_epoch, evaluate,
                            load_checkpoint, prepare_data, probe_layer_nas,
                            regularizer_coefficients, run_experiment,
                            save_checkpoint, smoothed_test_loss,
                            train_single_run)
from naslab.history import EpochRecord, RunHistory
from naslab.nn import BatchNorm, Conv2D, Dense, Dropout
from naslab import cli


def tiny_config(out, **kw):
    base = dict(variant="vanilla", scale=64, kind="synthetic", train_size=96,
                test_size=48, classes=4, epochs=2, probe_size=8, repeats=1,
                seed=5, out=str(out), batch_size=16)
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    def test_defaults_mirror_protocol(self):
        cfg = ExperimentConfig()
        assert cfg.learning_rate == 0.01
        assert cfg.batch_size == 32
        assert cfg.repeats == 3
        assert cfg.epochs <= 300

    def test_round_trip(self, tmp_path):
        cfg = tiny_config(tmp_path / "out", variant="nasreg", noise=0.31,
                          contaminate=True)
        path = tmp_path / "exp.cfg"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_unknown_field_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[network]\nmomentum = 0.9\n")
        with pytest.raises(ConfigurationError, match="momentum"):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[wandb]\nproject = x\n")
        with pytest.raises(ConfigurationError, match="wandb"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / "nope.cfg")

    def test_invalid_values(self):
        with pytest.raises(ConfigurationError):
            ExperimentConfig(variant="l3")
        with pytest.raises(ConfigurationError):
            ExperimentConfig(learning_rate=0.0)
        with pytest.raises(ConfigurationError):
            ExperimentConfig(scale=512)  # widths collapse below 2 channels

    def test_widths_integer_division(self):
        assert ExperimentConfig(scale=1).widths() == (256, 256, 512, 512, 1024)
        assert ExperimentConfig(scale=16).widths() == (16, 16, 32, 32, 64)


class TestBuildNetwork:
    def test_full_scale_widths(self):
        net = build_network("vanilla", 1, 100)
        convs = {n: l for n, l in net.layers if isinstance(l, Conv2D)}
        assert [convs[f"conv{i}"].out_channels for i in range(1, 5)] == \
            [256, 256, 512, 512]
        fc1 = dict(net.layers)["fc1"]
        assert fc1.out_features == 1024
        assert dict(net.layers)["prediction"].out_features == 100

    def test_measured_layer_names_in_depth_order(self):
        net = build_network("vanilla", 16, 10)
        assert [mp.name for mp in net.measure_points] == \
            ["conv1", "conv2", "conv3", "conv4", "fc1", "prediction"]

    def test_nasreg_tags_all_but_prediction(self):
        net = build_network("nasreg", 16, 10)
        tags = {mp.name: mp.regularize for mp in net.measure_points}
        assert tags == {"conv1": True, "conv2": True, "conv3": True,
                        "conv4": True, "fc1": True, "prediction": False}

    def test_vanilla_has_no_tags(self):
        net = build_network("vanilla", 16, 10)
        assert not any(mp.regularize for mp in net.measure_points)

    def test_dropout_variant_rates(self):
        net = build_network("dropout", 16, 10)
        drops = {n: l.rate for n, l in net.layers if isinstance(l, Dropout)}
        assert drops == {"conv1_drop": 0.3, "conv2_drop": 0.3, "conv3_drop": 0.3,
                         "conv4_drop": 0.3, "fc1_drop": 0.5}

    def test_batchnorm_variant_moves_measure_point(self):
        net = build_network("batchnorm", 16, 10)
        names = [n for n, _ in net.layers]
        for mp in net.measure_points[:-1]:
            assert names[mp.layer_index].endswith("_bn")
        assert sum(isinstance(l, BatchNorm) for _, l in net.layers) == 5

    def test_bias_flag_strips_biases(self):
        net = build_network("vanilla", 16, 10, bias=False)
        for _, layer in net.layers:
            if isinstance(layer, (Conv2D, Dense)):
                assert layer.bias is None

    def test_forward_shapes(self, rng):
        net = build_network("vanilla", 32, 7)
        out = net.forward(rng.random((2, 3, 32, 32), dtype=np.float32))
        assert out.shape == (2, 7)

    def test_overscaled_rejected(self):
        with pytest.raises(ConfigurationError):
            build_network("vanilla", 200, 10)

    def test_regularizer_coefficients_one_over_r(self):
        net = build_network("nasreg", 16, 10)
        coeffs = regularizer_coefficients(net)
        assert coeffs == {"conv1": 1.0 / 1024, "conv2": 1.0 / 1024,
                          "conv3": 1.0 / 256, "conv4": 1.0 / 256, "fc1": 1.0}


class TestDetectOverfit:
    def _history(self, losses):
        h = RunHistory(layers=["c"], seed=1)
        for i, loss in enumerate(losses):
            h.append(EpochRecord(i, 1.0, loss, 0.5, layer_nas={"c": (0, 0, 0)}))
        return h

    def test_strictly_decreasing_not_overfit(self):
        report = detect_overfit_epoch(self._history([3.0, 2.0, 1.5, 1.2, 1.0]))
        assert report.verdict == "not overfit"
        assert not report.overfit

    def test_v_shape_returns_bottom(self):
        losses = [5.0, 4.0, 3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 5.0]
        report = detect_overfit_epoch(self._history(losses))
        assert report.epoch == 4
        assert report.verdict == "overfit"

    def test_spike_is_smoothed_away(self):
        # a single-epoch spike must neither trip the verdict nor distort the
        # minimum; the decreasing trend continues through it
        losses = [3.0, 2.5, 2.0, 9.0, 1.8, 1.7, 1.6]
        smoothed = smoothed_test_loss(self._history(losses))
        assert smoothed[3] < 9.0
        report = detect_overfit_epoch(self._history(losses))
        assert not report.overfit
        assert report.epoch == 6

    def test_short_history_rejected(self):
        with pytest.raises(InsufficientDataError):
            detect_overfit_epoch(self._history([1.0, 2.0]))

    def test_ratio_threshold(self):
        losses = [2.0, 1.0, 1.0, 1.0, 1.05, 1.05, 1.05]
        assert not detect_overfit_epoch(self._history(losses), ratio=1.10).overfit
        assert detect_overfit_epoch(self._history(losses), ratio=1.01).overfit


class TestRunExperiment:
    def test_zero_epochs_only_pretraining_probe(self, tmp_path):
        cfg = tiny_config(tmp_path / "out", epochs=0)
        histories = run_experiment(cfg)
        assert [r.epoch for r in histories[0].records] == [0]

    def test_three_repeats_three_histories_plus_band(self, tmp_path):
        cfg = tiny_config(tmp_path / "out", repeats=3, epochs=1)
        histories = run_experiment(cfg)
        assert len(histories) == 3
        for r in range(3):
            assert (tmp_path / "out" / f"run{r}" / "history.csv").exists()
        assert (tmp_path / "out" / "lineplot.csv").exists()
        assert (tmp_path / "out" / "lineplot.svg").exists()

    def test_determinism_across_executions(self, tmp_path):
        files = {}
        for name in ("a", "b"):
            cfg = tiny_config(tmp_path / name, epochs=2)
            run_experiment(cfg)
            files[name] = (tmp_path / name / "run0" / "history.csv").read_bytes()
        assert files["a"] == files["b"]

    def test_effective_config_round_trips(self, tmp_path):
        cfg = tiny_config(tmp_path / "out", epochs=1)
        run_experiment(cfg)
        assert load_config(tmp_path / "out" / "effective_config") == cfg

    def test_heatmaps_per_layer_per_epoch(self, tmp_path):
        cfg = tiny_config(tmp_path / "out", epochs=1)
        run_experiment(cfg)
        heatmaps = tmp_path / "out" / "run0" / "heatmaps"
        for layer in ("conv1", "conv4", "fc1", "prediction"):
            for epoch in (0, 1):
                assert (heatmaps / f"{layer}_{epoch}.ppm").exists()

    def test_contaminated_loss_logged(self, tmp_path):
        cfg = tiny_config(tmp_path / "out", epochs=1, contaminate=True,
                          contaminated_per_side=16)
        histories = run_experiment(cfg)
        assert all(r.contaminated_test_loss is not None
                   for r in histories[0].records)

    def test_nasreg_penalty_logged_and_bounded(self, tmp_path):
        cfg = tiny_config(tmp_path / "out", variant="nasreg", epochs=1)
        histories = run_experiment(cfg)
        widths = cfg.widths()
        lower = -sum([widths[0], widths[1], widths[2], widths[3], widths[4]])
        for r in histories[0].records:
            assert lower - 1e-6 <= r.penalty <= -5.0 + 1e-6  # 5 tagged layers

    def test_nan_loss_aborts_with_diagnostic(self, tmp_path):
        cfg = tiny_config(tmp_path / "out", learning_rate=1e9, epochs=1)
        bundle = prepare_data(cfg)
        with np.errstate(all="ignore"):
            with pytest.raises(DataError, match="non-finite loss"):
                train_single_run(cfg, bundle, 5, tmp_path / "out" / "run0")
        diag = json.loads((tmp_path / "out" / "run0" / "diagnostic.json").read_text())
        assert "layer" in diag and diag["epoch"] == 1

    def test_probe_never_mutates_state(self, tmp_path):
        cfg = tiny_config(tmp_path / "out", variant="batchnorm", epochs=1)
        bundle = prepare_data(cfg)
        rng = np.random.default_rng(0)
        net = build_network("batchnorm", cfg.scale, bundle.train.class_count, rng=rng)
        before = copy.deepcopy(net.state_arrays())
        probe_layer_nas(net, bundle.probe)
        evaluate(net, bundle.test)
        after = net.state_arrays()
        assert set(before) == set(after)
        for key in before:
            np.testing.assert_array_equal(before[key], after[key])


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        from naslab.harness import network_meta
        cfg = tiny_config(tmp_path / "out")
        net = build_network(cfg.variant, cfg.scale, 4, rng=rng)
        path = tmp_path / "w.npz"
        save_checkpoint(net, network_meta(cfg, 4), path)
        restored, meta = load_checkpoint(path)
        assert meta["class_count"] == 4
        x = rng.random((2, 3, 32, 32), dtype=np.float32)
        np.testing.assert_array_equal(net.forward(x), restored.forward(x))

    def test_shape_mismatch_detected(self, tmp_path, rng):
        from naslab.harness import network_meta
        cfg = tiny_config(tmp_path / "out")
        net = build_network(cfg.variant, cfg.scale, 4, rng=rng)
        path = tmp_path / "w.npz"
        save_checkpoint(net, network_meta(cfg, 5), path)  # wrong class count
        with pytest.raises(ConfigurationError):
            load_checkpoint(path)


class TestCli:
    def test_unknown_subcommand_usage_exit(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["frobnicate"])
        assert exc.value.code != 0
        assert "usage" in capsys.readouterr().err

    def test_gradcheck_passes(self, capsys):
        assert cli.main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_train_render_probe_pipeline(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path / "out", epochs=1)
        cfg_path = tmp_path / "exp.cfg"
        save_config(cfg, cfg_path)
        assert cli.main(["train", str(cfg_path)]) == 0
        out_dir = tmp_path / "out"
        plots = {p: (out_dir / p).read_bytes()
                 for p in ("lineplot.csv", "lineplot.svg", "run0/stripe.ppm")}

        assert cli.main(["render", str(out_dir)]) == 0
        for p, before in plots.items():
            assert (out_dir / p).read_bytes() == before

        # probe the checkpoint with a PPM image
        from naslab.viz import write_ppm
        image = np.zeros((32, 32, 3), dtype=np.uint8)
        image[8:16, 8:16] = 200
        img_path = tmp_path / "input.ppm"
        write_ppm(img_path, image)
        probe_out = tmp_path / "probe"
        assert cli.main(["probe", str(out_dir / "run0" / "weights.npz"),
                         str(img_path), "--out", str(probe_out)]) == 0
        assert (probe_out / "conv1.ppm").exists()
        assert (probe_out / "prediction.ppm").exists()

    def test_train_overrides(self, tmp_path):
        cfg = tiny_config(tmp_path / "ignored", epochs=0)
        cfg_path = tmp_path / "exp.cfg"
        save_config(cfg, cfg_path)
        out = tmp_path / "other"
        assert cli.main(["train", str(cfg_path), "--out", str(out),
                         "--seed", "99"]) == 0
        assert load_config(out / "effective_config").seed == 99

    def test_fetch_data_synthetic_loadable(self, tmp_path):
        target = tmp_path / "data"
        assert cli.main(["fetch-data", str(target), "--synthetic",
                         "--train-count", "50", "--test-count", "20"]) == 0
        total = 0
        for i in range(1, 6):
            total += len(load_cifar_binary(target / f"data_batch_{i}.bin", "cifar10"))
        assert total == 50
        assert len(load_cifar_binary(target / "test_batch.bin", "cifar10")) == 20

    def test_config_error_exits_nonzero(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[network]\nvariant = l3\n")
        assert cli.main(["train", str(bad)]) == 1
        assert "error" in capsys.readouterr().err


class TestCifarPipeline:
    def test_cifar10_kind_end_to_end(self, tmp_path):
        target = tmp_path / "data"
        assert cli.main(["fetch-data", str(target), "--synthetic",
                         "--train-count", "100", "--test-count", "40"]) == 0
        cfg = tiny_config(tmp_path / "out", kind="cifar10", classes=10,
                          data_path=str(target), train_size=80, test_size=40,
                          epochs=1)
        histories = run_experiment(cfg)
        assert len(histories[0].records) == 2
