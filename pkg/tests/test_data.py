import numpy as np
import pytest

from geoinfra.data import (
    DEFAULT_BALANCES,
    FRACTION,
    FRACTION_BASE,
    FRACTION_TEST,
    FRACTION_TUNE,
    HOLDOUT,
    HOLDOUT_TEST,
    HOLDOUT_TRAIN,
    KFOLD,
    NormalizationError,
    OUTCOME_NAMES,
    RasterPatch,
    RasterSource,
    RasterTruncatedError,
    RasterValidationError,
    SurveyFormatError,
    SurveyRecord,
    SynthSpec,
    apply_normalization,
    center_crop,
    denormalize,
    fit_normalization,
    hflip,
    load_manifest,
    load_raster,
    load_survey,
    make_splits,
    random_hflip,
    save_raster,
    save_survey,
    split_records,
    synth_generate,
    write_manifest,
    write_synth_dataset,
)
from geoinfra.errors import DataError
from geoinfra.rng import RngState

SURVEY_HEADER = ("geocode,lat,lon,country,urban,electricity,sewerage,piped_water,"
                 "road,post_office,market_stalls,police_station,bank,cellphone,"
                 "school,health_clinic")


def make_record(geocode="G1", lat=0.5, lon=30.0, country="uganda", urban=True,
                **outcomes):
    full = {name: None for name in OUTCOME_NAMES}
    full.update(outcomes)
    return SurveyRecord(geocode=geocode, lat=lat, lon=lon, country=country,
                        urban=urban, outcomes=full)


# ---------------------------------------------------------------------------
# survey CSV


def test_load_survey_three_rows(tmp_path):
    path = tmp_path / "survey.csv"
    path.write_text(
        SURVEY_HEADER + "\n"
        "G1,0.5,32.1,uganda,1,1,0,1,,0,1,0,1,1,1,0\n"
        "G2,-1.25,36.8,kenya,0,0,1,,1,0,0,1,0,1,0,1\n"
        "G3,-6.8,39.2,tanzania,,1,1,1,1,1,1,1,1,1,1,1\n")
    records = load_survey(path)
    assert len(records) == 3
    assert records[0].geocode == "G1"
    assert records[0].lat == pytest.approx(0.5)
    assert records[0].country == "uganda"
    assert records[0].urban is True
    assert records[0].outcomes["electricity"] == 1
    assert records[0].outcomes["road"] is None
    assert records[1].outcomes["piped_water"] is None
    assert records[2].urban is None


def test_load_survey_lat_out_of_range(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text(SURVEY_HEADER + "\nG1,95,30,uganda,1,1,0,1,0,0,1,0,1,1,1,0\n")
    with pytest.raises(SurveyFormatError, match="line 2.*latitude"):
        load_survey(path)


def test_load_survey_empty_cell_is_missing(tmp_path):
    path = tmp_path / "missing.csv"
    path.write_text(SURVEY_HEADER + "\nG1,1,2,chad,1,,0,1,0,0,1,0,1,1,1,0\n")
    records = load_survey(path)
    assert records[0].outcomes["electricity"] is None


def test_load_survey_unknown_column(tmp_path):
    path = tmp_path / "odd.csv"
    path.write_text(SURVEY_HEADER.replace("sewerage", "sewers") + "\n")
    with pytest.raises(SurveyFormatError, match="unknown columns.*sewers"):
        load_survey(path)


def test_load_survey_bad_outcome_value(tmp_path):
    path = tmp_path / "odd.csv"
    path.write_text(SURVEY_HEADER + "\nG1,1,2,chad,1,2,0,1,0,0,1,0,1,1,1,0\n")
    with pytest.raises(SurveyFormatError, match="line 2.*electricity"):
        load_survey(path)


def test_survey_round_trip(tmp_path):
    records = [
        make_record("G1", electricity=1, road=0),
        make_record("G2", lat=-3.5, lon=12.25, country="chad", urban=None,
                    sewerage=1),
    ]
    path = tmp_path / "rt.csv"
    save_survey(records, path)
    loaded = load_survey(path)
    assert loaded == records


def test_crlf_accepted(tmp_path):
    path = tmp_path / "crlf.csv"
    path.write_bytes((SURVEY_HEADER + "\r\nG1,1,2,chad,1,1,0,1,0,0,1,0,1,1,1,0\r\n")
                     .encode())
    assert len(load_survey(path)) == 1


# ---------------------------------------------------------------------------
# raster format


def random_patch(rng, bands=5, h=16, w=16, source=RasterSource.synthetic):
    return RasterPatch(
        source=source,
        pixels=rng.normal(size=(bands, h, w)).astype(np.float32),
        center_lat=1.25, center_lon=32.5, meters_per_pixel=30.0)


def test_raster_round_trip_bit_identical(tmp_path):
    patch = random_patch(np.random.default_rng(0))
    path = tmp_path / "p.girp"
    save_raster(patch, path)
    loaded = load_raster(path)
    assert loaded.pixels.tobytes() == patch.pixels.tobytes()
    assert loaded.source == patch.source
    assert loaded.center_lat == patch.center_lat
    assert loaded.center_lon == patch.center_lon
    assert loaded.meters_per_pixel == np.float32(30.0)


def test_raster_round_trip_odd_floats(tmp_path):
    pixels = np.array([[[-0.0, 1e-45], [-1e-38, 3e38]]], dtype=np.float32)
    patch = RasterPatch(RasterSource.synthetic, pixels, 0.0, 0.0, 10.0)
    save_raster(patch, tmp_path / "o.girp")
    assert load_raster(tmp_path / "o.girp").pixels.tobytes() == pixels.tobytes()


def test_raster_truncation(tmp_path):
    patch = random_patch(np.random.default_rng(1), bands=6)
    path = tmp_path / "t.girp"
    save_raster(patch, path)
    blob = path.read_bytes()
    # drop one band's worth of payload: header claims 6, file carries 5
    path.write_bytes(blob[:-4 * 16 * 16])
    with pytest.raises(RasterTruncatedError, match="payload"):
        load_raster(path)


def test_raster_bad_magic(tmp_path):
    path = tmp_path / "m.girp"
    path.write_bytes(b"JUNK" + b"\x00" * 50)
    with pytest.raises(DataError, match="magic"):
        load_raster(path)


def test_raster_source_band_mismatch():
    rng = np.random.default_rng(2)
    with pytest.raises(RasterValidationError, match="landsat8 declares 6 bands"):
        random_patch(rng, bands=5, source=RasterSource.landsat8)


# ---------------------------------------------------------------------------
# crops and flips


def test_center_crop_500_to_224():
    pixels = np.zeros((1, 500, 500), dtype=np.float32)
    pixels[0, 138, 138] = 1.0  # expected top-left corner of the window
    pixels[0, 138 + 223, 138 + 223] = 2.0
    patch = RasterPatch(RasterSource.synthetic, pixels, 0, 0, 30)
    out = center_crop(patch, 224)
    assert out.pixels.shape == (1, 224, 224)
    assert out.pixels[0, 0, 0] == 1.0
    assert out.pixels[0, 223, 223] == 2.0


def test_center_crop_identity_and_hand_case():
    rng = np.random.default_rng(3)
    patch = random_patch(rng, bands=2, h=5, w=5)
    same = center_crop(patch, 5)
    assert np.array_equal(same.pixels, patch.pixels)
    small = center_crop(patch, 3)
    assert np.array_equal(small.pixels, patch.pixels[:, 1:4, 1:4])


def test_center_crop_idempotent():
    patch = random_patch(np.random.default_rng(4), h=11, w=9)
    once = center_crop(patch, 6)
    twice = center_crop(once, 6)
    assert np.array_equal(once.pixels, twice.pixels)


def test_center_crop_too_large():
    patch = random_patch(np.random.default_rng(5), h=4, w=4)
    with pytest.raises(ValueError, match="exceeds"):
        center_crop(patch, 8)


def test_hflip_involution_and_identity():
    patch = random_patch(np.random.default_rng(6))
    assert np.array_equal(hflip(hflip(patch)).pixels, patch.pixels)
    # forced no-flip: p=0 keeps the patch bit-identical
    out = random_hflip(patch, RngState(0), p=0.0)
    assert np.array_equal(out.pixels, patch.pixels)
    # forced flip: p=1 always flips
    out = random_hflip(patch, RngState(0), p=1.0)
    assert np.array_equal(out.pixels, patch.pixels[:, :, ::-1])


def test_hflip_fraction_near_half():
    patch = random_patch(np.random.default_rng(7), bands=1, h=2, w=2)
    rng = RngState(303)
    flips = sum(
        not np.array_equal(random_hflip(patch, rng).pixels, patch.pixels)
        for _ in range(10_000))
    assert 0.47 <= flips / 10_000 <= 0.53


# ---------------------------------------------------------------------------
# normalization


def test_normalization_zero_mean_unit_std():
    rng = np.random.default_rng(8)
    patches = [random_patch(rng, bands=3, h=8, w=8) for _ in range(10)]
    shifted = [RasterPatch(p.source, p.pixels + 5.0, p.center_lat, p.center_lon,
                           p.meters_per_pixel) for p in patches]
    stats = fit_normalization(shifted)
    normed = np.stack([apply_normalization(p, stats).pixels for p in shifted])
    assert np.allclose(normed.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
    assert np.allclose(normed.std(axis=(0, 2, 3)), 1.0, atol=1e-5)


def test_normalization_uses_train_stats_not_own():
    train = [RasterPatch(RasterSource.synthetic,
                         np.full((1, 4, 4), v, dtype=np.float32) +
                         np.linspace(0, 1, 16, dtype=np.float32).reshape(1, 4, 4),
                         0, 0, 30) for v in (0.0, 2.0)]
    stats = fit_normalization(train)
    held_out = RasterPatch(RasterSource.synthetic,
                           np.full((1, 4, 4), 100.0, dtype=np.float32), 0, 0, 30)
    out = apply_normalization(held_out, stats)
    # own-stats normalization would center at 0; train stats leave it far out
    assert out.pixels.mean() > 50


def test_normalization_invertible():
    rng = np.random.default_rng(9)
    patches = [random_patch(rng, bands=2, h=6, w=6) for _ in range(4)]
    stats = fit_normalization(patches)
    p = patches[0]
    restored = denormalize(apply_normalization(p, stats), stats)
    assert np.allclose(restored.pixels, p.pixels, atol=1e-5)


def test_normalization_zero_variance_band():
    flat = RasterPatch(RasterSource.synthetic, np.ones((2, 4, 4), np.float32), 0, 0, 30)
    with pytest.raises(NormalizationError, match="zero-variance"):
        fit_normalization([flat, flat])


# ---------------------------------------------------------------------------
# splits


def _records_with_geocodes(n, prefix="G", country="uganda"):
    return [make_record(f"{prefix}{i:03d}", lat=i * 0.01, lon=30 + i * 0.01,
                        country=country, electricity=i % 2) for i in range(n)]


def test_kfold_even_split():
    records = _records_with_geocodes(100)
    spec = make_splits(records, seed=1, mode=KFOLD, k=5)
    sizes = [len(spec.geocodes_in_fold(f)) for f in range(5)]
    assert sizes == [20] * 5


def test_shared_geocode_stays_together():
    records = _records_with_geocodes(30)
    records.append(make_record("G001", electricity=1))
    for seed in range(20):
        spec = make_splits(records, seed=seed, mode=KFOLD, k=5)
        folds = {spec.fold_of(r.geocode) for r in records if r.geocode == "G001"}
        assert len(folds) == 1


def test_kfold_disjoint_and_covering():
    records = _records_with_geocodes(57)
    spec = make_splits(records, seed=3, mode=KFOLD, k=5)
    all_geos = {r.geocode for r in records}
    seen = []
    for f in range(5):
        fold_geos = spec.geocodes_in_fold(f)
        seen.extend(fold_geos)
    assert sorted(seen) == sorted(all_geos)  # exactly once each


def test_holdout_contract():
    records = (_records_with_geocodes(10, "U", "uganda")
               + _records_with_geocodes(25, "K", "kenya"))
    spec = make_splits(records, seed=2, mode=HOLDOUT, country="uganda")
    test_records = split_records(records, spec, HOLDOUT_TEST)
    train_records = split_records(records, spec, HOLDOUT_TRAIN)
    assert len(test_records) == 10
    assert all(r.country == "uganda" for r in test_records)
    assert all(r.country != "uganda" for r in train_records)


def test_holdout_unknown_country():
    with pytest.raises(DataError, match="unknown country"):
        make_splits(_records_with_geocodes(5), seed=0, mode=HOLDOUT, country="atlantis")


def test_fraction_split_roles_and_balance():
    records = (_records_with_geocodes(40, "U", "uganda")
               + _records_with_geocodes(40, "K", "kenya"))
    spec = make_splits(records, seed=4, mode=FRACTION, country="uganda",
                       fraction=0.5, stratify_outcome="electricity")
    tune = spec.geocodes_in_fold(FRACTION_TUNE)
    test = spec.geocodes_in_fold(FRACTION_TEST)
    base = spec.geocodes_in_fold(FRACTION_BASE)
    assert len(tune) == 20 and len(test) == 20 and len(base) == 40
    label = {r.geocode: r.outcomes["electricity"] for r in records}
    tune_balance = np.mean([label[g] for g in tune])
    test_balance = np.mean([label[g] for g in test])
    assert tune_balance == pytest.approx(test_balance, abs=0.06)


def test_fraction_zero_puts_everything_in_test():
    records = _records_with_geocodes(20)
    spec = make_splits(records, seed=5, mode=FRACTION, country="uganda", fraction=0.0)
    assert len(spec.geocodes_in_fold(FRACTION_TUNE)) == 0
    assert len(spec.geocodes_in_fold(FRACTION_TEST)) == 20


def test_fraction_out_of_range():
    with pytest.raises(ValueError, match="0.8"):
        make_splits(_records_with_geocodes(5), seed=0, mode=FRACTION,
                    country="uganda", fraction=0.9)


def test_split_determinism():
    records = _records_with_geocodes(50)
    a = make_splits(records, seed=11, mode=KFOLD, k=5)
    b = make_splits(records, seed=11, mode=KFOLD, k=5)
    assert a.assignments == b.assignments


# ---------------------------------------------------------------------------
# synthetic generator


def test_synth_balance_within_binomial_band():
    ds = synth_generate(SynthSpec(n_records=1000, seed=42, patch_size=8,
                                  duplicate_geocode_fraction=0.0))
    positives = sum(r.outcomes["electricity"] for r in ds.records)
    # binomial 3-sigma band around 667 of 1000
    assert 637 <= positives <= 697


def test_synth_iid_nearest_neighbor_agreement():
    ds = synth_generate(SynthSpec(n_records=1000, seed=7, patch_size=4,
                                  correlation_length=0.0,
                                  duplicate_geocode_fraction=0.0))
    recs = ds.records
    coords = np.array([[r.lat, r.lon] for r in recs])
    labels = np.array([r.outcomes["electricity"] for r in recs])
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    nn = d2.argmin(axis=1)
    agreement = float((labels == labels[nn]).mean())
    p = DEFAULT_BALANCES["electricity"]
    expected = p * p + (1 - p) * (1 - p)
    assert agreement == pytest.approx(expected, abs=0.05)


def test_synth_correlated_labels_agree_locally():
    ds = synth_generate(SynthSpec(n_records=800, seed=7, patch_size=4,
                                  correlation_length=3.0,
                                  duplicate_geocode_fraction=0.0))
    recs = ds.records
    coords = np.array([[r.lat, r.lon] for r in recs])
    labels = np.array([r.outcomes["electricity"] for r in recs])
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    nn = d2.argmin(axis=1)
    assert float((labels == labels[nn]).mean()) >= 0.85


def test_synth_deterministic():
    spec = SynthSpec(n_records=60, seed=9, patch_size=8)
    a = synth_generate(spec)
    b = synth_generate(spec)
    assert a.records == b.records
    for g in a.patches:
        assert np.array_equal(a.patches[g].pixels, b.patches[g].pixels)
    assert a.osm_counts == b.osm_counts


def test_synth_plants_band_signal():
    ds = synth_generate(SynthSpec(n_records=400, seed=3, patch_size=8,
                                  duplicate_geocode_fraction=0.0))
    means = []
    labels = []
    for r in ds.records:
        means.append(ds.patches[r.geocode].pixels[0].mean())
        labels.append(r.outcomes["electricity"])
    means = np.array(means)
    labels = np.array(labels)
    assert means[labels == 1].mean() - means[labels == 0].mean() > 0.8


def test_synth_infeasible_balance():
    with pytest.raises(ValueError, match="infeasible"):
        synth_generate(SynthSpec(n_records=2, balances={"electricity": 0.01},
                                 patch_size=4))


def test_synth_duplicates_share_everything():
    ds = synth_generate(SynthSpec(n_records=100, seed=5, patch_size=4,
                                  duplicate_geocode_fraction=0.1))
    by_geocode: dict = {}
    for r in ds.records:
        by_geocode.setdefault(r.geocode, []).append(r)
    dups = {g: rs for g, rs in by_geocode.items() if len(rs) > 1}
    assert dups, "expected some duplicated geocodes"
    for rs in dups.values():
        assert len({(r.lat, r.lon, r.country) for r in rs}) == 1
        assert len({tuple(sorted(r.outcomes.items(), key=lambda kv: kv[0])) for r in rs}) == 1


# ---------------------------------------------------------------------------
# manifest and dataset writing


def test_manifest_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    p = random_patch(rng, bands=1, source=RasterSource.dmsp)
    save_raster(p, tmp_path / "a.girp")
    write_manifest(tmp_path / "manifest.csv",
                   [("G1", RasterSource.dmsp, "a.girp")])
    mapping = load_manifest(tmp_path / "manifest.csv")
    assert RasterSource.dmsp in mapping["G1"]
    loaded = load_raster(mapping["G1"][RasterSource.dmsp])
    assert np.array_equal(loaded.pixels, p.pixels)


def test_write_synth_dataset_round_trip(tmp_path):
    ds = synth_generate(SynthSpec(n_records=20, seed=2, patch_size=6))
    paths = write_synth_dataset(ds, tmp_path)
    records = load_survey(paths["survey"])
    assert len(records) == 20
    mapping = load_manifest(paths["manifest"])
    some = next(iter(mapping))
    patch = load_raster(mapping[some][RasterSource.synthetic])
    assert np.array_equal(patch.pixels, ds.patches[some].pixels)
