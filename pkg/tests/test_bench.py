"""H-score arithmetic, FLOPs accounting, and the evaluation harness."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathfuse import bench, data, multipath, nn
from pathfuse.tensor import _conv_out_size


def small_arch():
    return nn.ArchSpec(channels=(4, 8), num_classes=3, input_hw=(8, 8))


class TestHScore:
    def test_published_anchor_points(self):
        assert bench.h_score(90.0, 75.0) == pytest.approx(81.8, abs=0.05)
        assert bench.h_score(73.4, 75.4) == pytest.approx(74.4, abs=0.05)

    def test_symmetry_and_bounds(self):
        assert bench.h_score(60.0, 80.0) == bench.h_score(80.0, 60.0)
        assert bench.h_score(0.0, 0.0) == 0.0
        assert bench.h_score(100.0, 100.0) == 100.0

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            bench.h_score(-1.0, 50.0)
        with pytest.raises(ValueError):
            bench.h_score(50.0, 101.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 100.0), st.floats(0.01, 100.0))
def test_h_score_between_min_and_mean(s, t):
    h = bench.h_score(s, t)
    assert min(s, t) - 1e-9 <= h <= (s + t) / 2 + 1e-9


class TestFlops:
    def test_hand_counted_single_model(self):
        arch = small_arch()
        model = nn.init_model(arch, seed=0)
        ext, heads, total = bench.flops_count(model)
        want_ext, (c, h, w) = 0, (3, 8, 8)
        for c2 in arch.channels:
            h2 = _conv_out_size(h, 3, 2, 1)
            w2 = _conv_out_size(w, 3, 2, 1)
            out = c2 * h2 * w2
            want_ext += 2 * out * c * 9 + 2 * out + out  # conv + BN + relu
            c, h, w = c2, h2, w2
        want_ext += c * h * w  # pool
        assert ext == want_ext
        assert heads == 2 * 3 * arch.channels[-1]
        assert total == ext + heads

    def test_unfused_to_fused_ratio_near_pathway_count(self):
        # the default architecture; tiny ones inflate the non-conv overhead
        sources = [nn.init_model(nn.ArchSpec(), seed=s) for s in range(3)]
        model = multipath.assemble(sources)
        fused = multipath.fuse_model(model)
        ratio = bench.flops_count(model)[0] / bench.flops_count(fused)[0]
        assert 2.94 <= ratio <= 3.06

    def test_fused_extra_heads_cost(self):
        single = multipath.fuse_model(
            multipath.assemble([nn.init_model(small_arch(), seed=0)]))
        triple = multipath.fuse_model(
            multipath.assemble([nn.init_model(small_arch(), seed=s)
                                for s in range(3)]))
        head_cost = bench.flops_count(single)[1]
        assert bench.flops_count(triple)[2] - bench.flops_count(single)[2] \
            == 2 * head_cost

    def test_batch_scaling(self):
        model = nn.init_model(small_arch(), seed=0)
        one = bench.flops_count(model, (1, 3, 8, 8))
        four = bench.flops_count(model, (4, 3, 8, 8))
        assert four == tuple(4 * v for v in one)


class TestEvaluate:
    def test_report_fields(self):
        ds = data.gen_domain(data.DomainSpec(samples_per_class=4, seed=0), 10)
        rng = np.random.default_rng(0)

        def fn(images):
            p = rng.uniform(size=(images.shape[0], 10))
            return p / p.sum(axis=1, keepdims=True)

        report = bench.evaluate(fn, {"a": ds, "b": ds}, ds, flops=(10, 2, 12))
        assert set(report.source_accuracies) == {"a", "b"}
        assert report.h == pytest.approx(
            bench.h_score(report.source_mean, report.target_accuracy))
        assert report.flops_total == 12
        d = report.to_dict()
        assert {"S", "T", "H"} <= set(d)

    def test_rejects_empty_sets(self):
        ds = data.gen_domain(data.DomainSpec(samples_per_class=2, seed=0), 10)
        empty = data.LabeledSet(np.zeros((0, 3, 16, 16), np.float32),
                                np.zeros(0, np.int64))
        with pytest.raises(ValueError):
            bench.evaluate(lambda im: None, {"a": empty}, ds)


class TestExperimentPlumbing:
    def test_rejects_unknown_method(self):
        with pytest.raises(ValueError):
            bench.run_experiment(bench.ExperimentConfig(methods=("magic",)))

    def test_rejects_bad_target_index(self):
        cfg = bench.ExperimentConfig(target_index=7, methods=("source-ens",))
        with pytest.raises(ValueError):
            bench.run_experiment(cfg)

    def test_tiny_experiment_rows(self):
        specs = [data.DomainSpec("identity", samples_per_class=20, seed=1),
                 data.DomainSpec("invert", samples_per_class=20, seed=2),
                 data.DomainSpec("noise", noise_sigma=0.1,
                                 samples_per_class=20, seed=3)]
        cfg = bench.ExperimentConfig(domain_specs=specs, target_index=1,
                                     methods=("source-ens", "seprep"),
                                     source_epochs=2, adapt_epochs=1, seed=0)
        rows = bench.run_experiment(cfg)
        assert [r["method"] for r in rows] == ["source-ens", "seprep"]
        for row in rows:
            assert 0.0 <= row["T"] <= 100.0
            assert row["flops_total"] > 0

    def test_write_report(self, tmp_path):
        rows = [{"method": "seprep", "S": 80.0, "T": 70.0, "H": 74.7,
                 "flops_extractor": 5, "flops_heads": 1, "flops_total": 6,
                 "source_accuracies": {}, "wall_clock_s": 0.0, "config": {}}]
        csv_path = str(tmp_path / "r.csv")
        json_path = str(tmp_path / "r.json")
        bench.write_report(rows, csv_path=csv_path, json_path=json_path)
        text = open(csv_path).read().splitlines()
        assert text[0].startswith("method,S,T,H")
        assert text[1].startswith("seprep,80.0,70.0")
        assert json.load(open(json_path))[0]["method"] == "seprep"

    def test_format_table_contains_methods(self):
        rows = [{"method": "seprep", "S": 1.0, "T": 2.0, "H": 1.3,
                 "flops_total": 9}]
        table = bench.format_table(rows)
        assert "seprep" in table and "H" in table
