"""Small hand-checkable cases, one per documented behaviour of each operation."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from conftest import T10, grid, scene
from mangrovewatch import change as ca
from mangrovewatch.dataset import (
    DatasetIndex,
    SplitSpec,
    TileSample,
    apply_transform,
    partition_by_content,
    split,
    stratified_batches,
    tile_scene,
)
from mangrovewatch.errors import DataAvailabilityError, ShapeError
from mangrovewatch.evaluate import ConfusionMatrix, confusion_counts, metrics
from mangrovewatch.model import ModelConfig, build_model, predict_logits, predict_mask
from mangrovewatch.preprocess import (
    MonthlyWaterArea,
    TideWindow,
    build_window_composite,
    cloud_mask,
    filter_scenes,
    ndwi,
    select_tide_window,
    water_area,
)
from mangrovewatch.raster import GeoTransform, ManifestEntry, RegionMask, clip_to_region, mosaic, pixel_area_hectares, resample_to
from mangrovewatch.training import (
    EarlyStopState,
    TrainConfig,
    combined_loss,
    dice_loss,
    early_stop_update,
    lr_at,
    soft_cross_entropy,
    train,
)

TABLE_AREAS = [7080.88, 7271.29, 7465.93, 7707.80, 8354.46, 8247.55, 8606.17, 9142.21]


def region(mask):
    return RegionMask("r", grid(np.asarray(mask, dtype=np.uint8)))


# ------------------------------------------------------------------ raster


class TestClip:
    def test_all_ones_is_identity(self):
        s = scene(np.arange(32.0).reshape(2, 4, 4))
        assert np.array_equal(clip_to_region(s, region(np.ones((4, 4)))).stack(), s.stack())

    def test_all_zeros_annihilates(self):
        s = scene(np.ones((2, 4, 4)))
        assert clip_to_region(s, region(np.zeros((4, 4)))).invalid_mask().all()

    def test_left_half(self):
        s = scene(np.arange(16.0).reshape(1, 4, 4))
        m = np.zeros((4, 4))
        m[:, :2] = 1
        out = clip_to_region(s, region(m)).bands[0]
        assert np.array_equal(out.values[:, :2], s.bands[0].values[:, :2])
        assert (out.values[:, 2:] == -9999.0).all()

    def test_idempotent(self):
        s = scene(np.random.default_rng(0).uniform(size=(2, 4, 4)))
        r = region(np.eye(4))
        once = clip_to_region(s, r)
        assert np.array_equal(clip_to_region(once, r).stack(), once.stack())


class TestMosaic:
    def test_single_scene(self):
        s = scene(np.arange(8.0).reshape(2, 2, 2))
        assert np.array_equal(mosaic([s]).stack(), s.stack())

    def test_mean_of_two(self):
        out = mosaic([scene(np.full((1, 1, 1), 10.0)), scene(np.full((1, 1, 1), 20.0))], "mean")
        assert out.bands[0].values[0, 0] == 15.0

    def test_median_of_three(self):
        out = mosaic([scene(np.full((1, 1, 1), v)) for v in (3.0, 9.0, 5.0)], "median")
        assert out.bands[0].values[0, 0] == 5.0


class TestResample:
    def test_same_transform(self):
        g = grid(np.arange(4.0).reshape(2, 2))
        assert np.array_equal(resample_to(g, T10).values, g.values)

    def test_nearest_constant_upsample(self):
        t20 = GeoTransform(500_000.0, 2_700_000.0, 20.0, -20.0)
        out = resample_to(grid(np.full((2, 2), 7.0), transform=t20), T10, "nearest")
        assert out.shape == (4, 4) and (out.values == 7.0).all()

    def test_bilinear_midpoint(self):
        g = grid(np.array([[0.0, 2.0], [0.0, 2.0]]))
        half = GeoTransform(T10.origin_x + 5.0, T10.origin_y, 10.0, -10.0)
        out = resample_to(g, half, "bilinear", shape=(2, 1))
        assert out.values[:, 0].tolist() == [1.0, 1.0]


@pytest.mark.parametrize("w,h,ha", [(10, 10, 0.01), (100, 100, 1.0), (20, 10, 0.02)])
def test_pixel_area(w, h, ha):
    assert pixel_area_hectares(GeoTransform(0.0, 0.0, w, -h)) == pytest.approx(ha)


# -------------------------------------------------------------- preprocess


def _e(cover):
    return ManifestEntry("x", None, (2020, 1), [], cover)


def test_cloud_filter_examples():
    assert [e.cloud_cover for e in filter_scenes([_e(5), _e(10), _e(50)], 10)] == [5]
    assert len(filter_scenes([_e(5), _e(10), _e(50)], 100)) == 3
    assert filter_scenes([], 10) == []


class TestCloudMask:
    def test_all_clear(self):
        s = scene(np.ones((2, 3, 3)), qa=np.full((3, 3), 4))
        assert np.array_equal(cloud_mask(s).stack(), s.stack())

    def test_all_cloud(self):
        s = scene(np.ones((2, 3, 3)), qa=np.full((3, 3), 9))
        assert cloud_mask(s).invalid_mask().all()

    def test_center_pixel(self):
        qa = np.full((3, 3), 4)
        qa[1, 1] = 8
        out = cloud_mask(scene(np.ones((2, 3, 3)), qa=qa))
        for b in out.bands:
            assert (~b.valid_mask()).tolist() == [[False] * 3, [False, True, False], [False] * 3]


@pytest.mark.parametrize("g,n,expected", [(0.5, 0.5, 0.0), (0.8, 0.2, 0.6), (0.0, 0.0, None)])
def test_ndwi_examples(g, n, expected):
    out = ndwi(grid(np.array([[g]])), grid(np.array([[n]])))
    if expected is None:
        assert not out.valid_mask()[0, 0]
    else:
        assert out.values[0, 0] == pytest.approx(expected)


def test_water_area_examples():
    assert water_area(grid(np.full((2, 2), -9999.0), nodata=-9999.0), 0.0) == 0.0
    fifty = np.full((10, 10), -1.0)
    fifty.flat[:50] = 0.5
    assert water_area(grid(fifty), 0.0, 0.01) == pytest.approx(0.5)
    assert water_area(grid(np.array([[-0.2, 0.1, 0.4, 0.0]])), 0.0, 0.01) == pytest.approx(0.02)


def _months(areas):
    return [MonthlyWaterArea(2020, m, a) for m, a in areas.items()]


def test_tide_window_examples():
    assert select_tide_window(_months({1: 5.0, 2: 3.0, 3: 4.0, 4: 3.5})).months == ((2020, 2), (2020, 4))
    assert select_tide_window(_months({m: 1.0 for m in range(1, 13)})).months == ((2020, 1), (2020, 2))
    assert select_tide_window(_months({7: 9.0, 11: 1.0})).months == ((2020, 7), (2020, 11))


class TestWindowComposite:
    window = TideWindow(((2020, 3), (2020, 4)))

    def _run(self, scenes):
        manifest = [ManifestEntry(k, None, (2020, 3), s.band_names, 1.0) for k, s in scenes.items()]
        for k, s in scenes.items():
            s.scene_id = k
        return build_window_composite(manifest, self.window, region(np.ones((3, 3))), scenes=scenes)

    def test_one_scene_is_masked_and_clipped(self):
        qa = np.full((3, 3), 4)
        qa[0, 0] = 9
        s = scene(np.arange(9.0).reshape(1, 3, 3) + 1, qa=qa)
        out = self._run({"a": s})
        expected = cloud_mask(s).bands[0]
        assert np.array_equal(out.bands[0].values, expected.values)

    def test_cloudy_pixel_takes_other_scene(self):
        qa = np.full((3, 3), 4)
        qa[1, 1] = 9
        first = scene(np.full((1, 3, 3), 1.0), qa=qa)
        second = scene(np.full((1, 3, 3), 2.0), qa=np.full((3, 3), 4))
        out = self._run({"a": first, "b": second})
        assert out.bands[0].values[1, 1] == 2.0

    def test_no_scene(self):
        with pytest.raises(DataAvailabilityError):
            build_window_composite([], self.window, region(np.ones((3, 3))))


# ----------------------------------------------------------------- dataset


@pytest.mark.parametrize("size,stride,count", [(256, 256, 1), (512, 256, 4), (512, 128, 9)])
def test_tile_counts(size, stride, count):
    s = scene(np.ones((1, size, size), dtype=np.float32))
    assert len(tile_scene(s, grid(np.zeros((size, size), np.uint8)), 256, stride)) == count


def _t(has, i=0, stratum="r0c0", size=2):
    lab = np.zeros((size, size), np.uint8)
    if has:
        lab[0, 0] = 1
    return TileSample(np.zeros((1, size, size), np.float32), lab, ("s", i, 0), stratum)


def test_partition_examples():
    idx = DatasetIndex([None] * 1568, [None] * 346, [None] * 1222)
    assert idx.pct_with == 22.07
    assert partition_by_content([_t(False), _t(False, 1)]).with_mangrove == []
    assert len(partition_by_content([_t(True)]).with_mangrove) == 1


def test_split_examples():
    idx = partition_by_content([_t(True, i) for i in range(10)])
    _, val = split(idx, SplitSpec(0.5, 9))
    assert len(val) == 5
    assert [t.key for t in split(idx, SplitSpec(0.5, 9))[1]] == [t.key for t in val]


def test_augment_examples():
    s = _t(True, size=256)
    assert np.array_equal(apply_transform(s, False, False, 0).label, s.label)
    twice = apply_transform(apply_transform(s, True, False, 0), True, False, 0)
    assert np.array_equal(twice.label, s.label)
    rot = apply_transform(s, False, False, 2).label
    assert rot[255, 255] == 1 and rot.sum() == 1


def test_batch_examples():
    one = [_t(True, i) for i in range(32)]
    batches = stratified_batches(one, 16, np.random.default_rng(0))
    assert [len(b) for b in batches] == [16, 16]
    two = [_t(True, i, "a") for i in range(16)] + [_t(True, 100 + i, "b") for i in range(16)]
    for b in stratified_batches(two, 16, np.random.default_rng(0)):
        assert sum(t.stratum == "a" for t in b) == 8
    odd = [_t(True, i) for i in range(33)]
    assert [len(b) for b in stratified_batches(odd, 16, np.random.default_rng(0))] == [16, 16, 1]


# ------------------------------------------------------------------- model


@pytest.mark.parametrize("depth,nodes", [(5, 15), (2, 3)])
def test_node_counts(depth, nodes):
    assert len(build_model(ModelConfig(depth=depth, base_width=4)).node_names) == nodes


def test_first_conv_takes_eleven_bands():
    model = build_model(ModelConfig(base_width=4))
    assert model.nodes["x0_0"].seq[0].in_channels == 11


def test_forward_shapes_depth5():
    model = build_model(ModelConfig(base_width=4)).eval()
    with torch.no_grad():
        assert model(torch.zeros(2, 11, 256, 256)).shape == (2, 1, 256, 256)
        assert model(torch.zeros(1, 11, 64, 64)).shape == (1, 1, 64, 64)
    with pytest.raises(ShapeError):
        model(torch.zeros(1, 11, 100, 100))


def test_all_nodata_scene_predicts_background():
    model = build_model(ModelConfig(in_channels=1, depth=2, base_width=2, band_names=["B3"]))
    mask = predict_mask(model, scene(np.full((1, 8, 8), -9999.0), ["B3"]), tile=8)
    assert mask.values.sum() == 0


def test_single_tile_equals_forward_pass():
    model = build_model(ModelConfig(in_channels=1, depth=2, base_width=2, band_names=["B3"]), seed=0).eval()
    img = np.random.default_rng(0).uniform(size=(1, 8, 8)).astype(np.float32)
    with torch.no_grad():
        ref = model(torch.from_numpy(img[None]))[0, 0].numpy() > 0
    assert np.array_equal(predict_logits(model, img, 8, 0) > 0, ref)


def test_overlap_blending():
    outputs = iter([2.0, -1.0])

    def fake(batch):
        return torch.full((batch.shape[0], 1, 4, 4), next(outputs))

    logits = predict_logits(fake, np.zeros((1, 4, 6), np.float32), tile=4, overlap=2, batch_size=1)
    assert logits[0, 2:4].tolist() == [0.5, 0.5]
    assert logits[0, 0] == 2.0 and logits[0, 5] == -1.0


# ---------------------------------------------------------------- training


def test_soft_ce_examples():
    y = torch.ones(1, 2, 2)
    assert soft_cross_entropy(torch.full((1, 1, 2, 2), 50.0), y, 0.0).item() < 1e-12
    assert soft_cross_entropy(torch.zeros(1, 1, 2, 2), y, 0.0).item() == pytest.approx(math.log(2))
    logit = math.log(0.9 / 0.1)
    value = soft_cross_entropy(torch.full((1, 1, 1, 1), logit), torch.ones(1, 1, 1), 0.2).item()
    assert value == pytest.approx(-(0.9 * math.log(0.9) + 0.1 * math.log(0.1)), abs=1e-6)
    assert value == pytest.approx(0.3251, abs=1e-4)


def test_dice_examples():
    y = torch.zeros(1, 64, 64)
    y[0, :10] = 1
    assert dice_loss(y.clone(), y, eps=1e-9).item() < 1e-6
    n = 4096
    disjoint = dice_loss(torch.cat([torch.zeros(n), torch.ones(n)]), torch.cat([torch.ones(n), torch.zeros(n)]), 1.0)
    assert disjoint.item() == pytest.approx(1 - 1 / (2 * n + 1))
    half = dice_loss(torch.full((4,), 0.5), torch.tensor([1.0, 1.0, 0.0, 0.0]), eps=0.0)
    assert half.item() == pytest.approx(0.5)


def test_combined_loss_projections():
    z = torch.randn(1, 1, 4, 4, generator=torch.Generator().manual_seed(0))
    y = (torch.rand(1, 4, 4, generator=torch.Generator().manual_seed(1)) > 0.5).float()
    ce = soft_cross_entropy(z, y, 0.1).item()
    dice = dice_loss(torch.sigmoid(z[:, 0]), y, 1.0).item()
    assert combined_loss(z, y, TrainConfig(loss_weights=(1, 0))).item() == pytest.approx(ce)
    assert combined_loss(z, y, TrainConfig(loss_weights=(0, 1))).item() == pytest.approx(dice)
    assert combined_loss(z, y, TrainConfig()).item() == pytest.approx(ce + dice)


def test_schedule_examples():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == pytest.approx(1e-4)
    assert lr_at(2 - 1e-12, cfg) == pytest.approx(1e-5)
    assert lr_at(1, cfg) == pytest.approx(5.5e-5)


def _drive(seq, patience=10):
    state = EarlyStopState()
    for epoch, m in enumerate(seq, start=1):
        state, stop = early_stop_update(state, epoch, m, patience)
        if stop:
            return state, epoch
    return state, None


def test_early_stop_examples():
    assert _drive([0.1 * k for k in range(1, 9)])[1] is None
    assert _drive([0.5] * 20)[1] == 11
    seq = [0.1 + 0.01 * k for k in range(28)] + [0.3] * 10
    assert _drive(seq)[0].best_epoch == 28


def test_patience_one_constant_model_runs_two_epochs():
    model = build_model(ModelConfig(in_channels=1, depth=2, base_width=2, band_names=["B3"]), seed=0)
    with torch.no_grad():
        model.heads[0].weight.zero_()
        model.heads[0].bias.fill_(-5.0)
    data = [_t(True, i, size=8) for i in range(3)]
    _, curve = train(model, data[:2], data[2:], TrainConfig(lr0=1e-12, lr_min=1e-13, patience=1, augment=False))
    assert len(curve) == 2


# ---------------------------------------------------------------- evaluate


def test_confusion_examples():
    truth = np.array([1, 0, 1, 0], bool)
    cm = confusion_counts(truth, truth)
    assert cm.fp == cm.fn == 0
    cm = confusion_counts(~truth, truth)
    assert cm.tp == cm.tn == 0
    assert confusion_counts(np.array([1, 1, 0, 0], bool), truth) == ConfusionMatrix(1, 1, 1, 1)


def test_metric_examples():
    assert all(metrics(ConfusionMatrix(5, 0, 0, 5))[k] == 1.0 for k in ("producer_acc", "user_acc", "f1", "miou"))
    m = metrics(ConfusionMatrix(1, 1, 1, 1))
    assert (m["producer_acc"], m["user_acc"], m["f1"]) == (0.5, 0.5, 0.5)
    assert m["iou_pos"] == m["iou_neg"] == m["miou"] == pytest.approx(1 / 3)


# ------------------------------------------------------------------ change


def test_area_examples():
    assert ca.area_hectares(np.zeros((4, 4)), 0.01) == 0.0
    assert ca.area_hectares(np.ones((10, 10)), 0.01) == pytest.approx(1.0)
    mask = np.zeros(1_000_000, np.uint8)
    mask[:708_088] = 1
    assert ca.area_hectares(mask, 0.01) == pytest.approx(7080.88)


def test_annual_change_rows():
    rows = ca.annual_changes(ca.AreaSeries(list(zip(range(2017, 2025), TABLE_AREAS))))
    assert (round(rows[1].annual_change_ha, 2), round(rows[1].annual_change_pct, 2)) == (190.41, 2.69)
    assert (round(rows[5].annual_change_ha, 2), round(rows[5].annual_change_pct, 2)) == (-106.91, -1.28)
    flat = ca.annual_changes(ca.AreaSeries([(2000, 5.0), (2001, 5.0)]))
    assert (flat[1].annual_change_ha, flat[1].annual_change_pct) == (0.0, 0.0)


def test_total_growth_examples():
    g = ca.total_growth(ca.AreaSeries([(2017, 7080.88), (2024, 9142.21)]))
    assert (round(g.delta_ha, 2), round(g.pct, 2)) == (2061.33, 29.11)
    g = ca.total_growth(ca.AreaSeries([(2017, 5530.08), (2024, 7385.68)]))
    assert round(g.delta_ha, 1) == 1855.6
    # exact rate is 33.554%; the published figure drops the second decimal
    assert abs(g.pct - 33.5) < 0.1
    g = ca.total_growth(ca.AreaSeries([(2017, 3.0), (2024, 3.0)]))
    assert (g.delta_ha, g.pct) == (0.0, 0.0)


def test_growth_rate_examples():
    s = ca.AreaSeries(list(zip(range(2017, 2025), TABLE_AREAS)))
    assert abs(ca.mean_annual_growth_rate(s) - 3.71) <= 0.05
    assert ca.mean_annual_growth_rate(ca.AreaSeries([(1, 4.0), (2, 4.0), (3, 4.0)])) == 0.0
    assert ca.mean_annual_growth_rate(ca.AreaSeries([(1, 4.0), (2, 8.0)])) == pytest.approx(100.0)


def test_carbon_examples():
    est = ca.carbon_estimate(2061.33)
    assert est.carbon_t == pytest.approx(194_383.42, abs=0.5)
    assert est.co2_t == pytest.approx(712_739.2, abs=0.5)
    zero = ca.carbon_estimate(0.0)
    assert (zero.carbon_t, zero.co2_t) == (0.0, 0.0)


def test_change_map_examples():
    m = np.array([[1, 0], [0, 1]])
    c = ca.change_map(m, m).counts()
    assert c["gain"] == c["loss"] == 0
    c = ca.change_map(np.zeros((2, 2)), np.ones((2, 2))).counts()
    assert c["gain"] == 4
    cls = ca.change_map(np.array([[1, 0]]), np.array([[0, 1]])).classes
    assert cls.tolist() == [[ca.LOSS, ca.GAIN]]


def test_region_series_examples():
    masks = {2019: grid(np.array([[1, 0], [1, 1]], np.uint8)), 2020: grid(np.array([[1, 1], [1, 1]], np.uint8))}
    total = ca.global_series(masks, 0.01)
    everything = ca.per_region_series(masks, [RegionMask("all", grid(np.ones((2, 2), np.uint8)))], 0.01)
    assert everything["all"].entries == total.entries
    empty_region = np.zeros((2, 2), np.uint8)
    masks_none = {y: grid(np.array([[1, 1], [0, 0]], np.uint8)) for y in (2019, 2020)}
    empty_region[1] = 1
    res = ca.per_region_series(masks_none, [RegionMask("last", grid(empty_region))], 0.01)
    assert res["last"].areas == [0.0, 0.0]
