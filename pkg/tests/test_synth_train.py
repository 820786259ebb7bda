import json

import numpy as np
import pytest

from leafmask.errors import ConfigError, DivergenceError
from leafmask.synth import FEATURE_NAMES, synth_rosette
from leafmask.train import ToyConfig, jsonl_logger, paste, train_toy


class TestSynth:
    def test_deterministic(self):
        a, b = synth_rosette(4), synth_rosette(4)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert a.boxes == b.boxes and a.features.tobytes() == b.features.tobytes()

    def test_five_leaves(self):
        r = synth_rosette(0, n_leaves=5)
        assert sorted(set(np.unique(r.labels)) - {0}) == [1, 2, 3, 4, 5]
        assert len(r.boxes) == 5
        assert r.features.shape == (len(FEATURE_NAMES), 32, 32)

    @pytest.mark.parametrize("seed", range(5))
    def test_no_overlap_is_disjoint(self, seed):
        r = synth_rosette(seed, n_leaves=6, overlap=0.0)
        assert r.leaf_masks.sum(axis=0).max() == 1

    def test_overlap_occludes(self):
        occluded = [synth_rosette(s, n_leaves=6, overlap=0.9).leaf_masks.sum(0).max() for s in range(5)]
        assert max(occluded) > 1

    def test_boxes_are_tight(self):
        r = synth_rosette(2)
        for i, b in enumerate(r.boxes):
            ys, xs = np.nonzero(r.labels == i + 1)
            assert (b.x1, b.y1, b.x2, b.y2) == (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)

    @pytest.mark.parametrize("kw", [dict(n_leaves=0), dict(overlap=1.0), dict(size=7)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            synth_rosette(0, **kw)


class TestPaste:
    def test_single_instance_fills_box(self):
        from leafmask.assembly import Box
        labels = paste([np.ones((4, 4))], [Box(2, 2, 6, 6)], 8)
        assert labels[2:6, 2:6].min() == 1 and labels.sum() == 16

    def test_largest_logit_wins(self):
        from leafmask.assembly import Box
        labels = paste([np.full((2, 2), 1.0), np.full((2, 2), 2.0)], [Box(0, 0, 4, 4), Box(2, 2, 6, 6)], 6)
        assert labels[3, 3] == 2 and labels[0, 0] == 1 and labels[5, 5] == 2

    def test_negative_logits_are_background(self):
        from leafmask.assembly import Box
        assert not paste([np.full((3, 3), -1.0)], [Box(0, 0, 3, 3)], 3).any()


class TestTrainToy:
    def test_short_run_logs_every_iteration(self, tmp_path):
        cfg = ToyConfig(iters=3, n_train=1, n_eval=1)
        path = tmp_path / "log.jsonl"
        with open(path, "w") as fh:
            result = train_toy(0, cfg, log=jsonl_logger(fh))
        records = [json.loads(line) for line in path.read_text().splitlines()]
        assert [r["iteration"] for r in records] == [0, 1, 2, 3]
        for r in records:
            assert r["l_cls"] == r["l_ctr"] == r["l_loc"] == 0.0
            assert r["total"] == pytest.approx(r["l_mask"] + 0.3 * r["l_sem"] + r["l_points"])
        assert 0.0 <= result.best_dice <= 100.0

    def test_deterministic(self):
        cfg = ToyConfig(iters=2, n_train=1, n_eval=1)
        a, b = train_toy(3, cfg), train_toy(3, cfg)
        assert a.history == b.history and a.best_dice == b.best_dice
        for k, v in a.model.tensors().items():
            assert v.tobytes() == b.model.tensors()[k].tobytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_iteration(self):
        cfg = ToyConfig(iters=50, lr=1e30, n_train=1, n_eval=1)
        with pytest.raises(DivergenceError, match="iteration"):
            train_toy(0, cfg)
