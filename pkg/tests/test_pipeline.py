"""This modules includes unit tests for the pipeline.py module."""

import json
import os
import threading
import time
from dataclasses import replace
from unittest import mock

import numpy as np
import pytest
from delayed_assert import assert_expectations, expect
from PIL import Image

from ddl_grounding.config import RunConfig
from ddl_grounding.dape import ORIGIN_VANILLA, vanilla_prompt
from ddl_grounding.dataset import DatasetManifest, ManifestEntry
from ddl_grounding.errors import TransportError, UnsupportedImage
from ddl_grounding.geometry import BoundingBox, TransformSpec, iou
from ddl_grounding.lvlm_client import MockNoise
from ddl_grounding.pipeline import (
    ANALYSIS_FILE,
    COMPARISON_FILE,
    CONFIG_FILE,
    FAILURES_FILE,
    HISTORY_FILE,
    LOG_FILE,
    PREDICTIONS_FILE,
    PURPOSE_INFER,
    PURPOSE_SCORE,
    REPORT_FILE,
    ArtifactWriter,
    EndpointGrounder,
    MockGrounder,
    analyze_run,
    derive_seed,
    evaluate_predictions,
    gate,
    infer_image,
    read_jsonl,
    run_ddl,
    run_uncertainty_mode,
    select_prompt,
)


class FlakyGrounder(MockGrounder):
    """Mock grounder with scripted load and request failures."""

    def load(self, entry):
        """Fail to read one image."""
        if entry.image_id == 'test-0005':
            raise UnsupportedImage('unreadable')
        return super(FlakyGrounder, self).load(entry)

    def __call__(self, entry, image, dims, spec, prompt, view_index=0,
                 temperature=None, purpose=PURPOSE_INFER):
        """Fail one reference call and one view call."""
        if (entry.image_id, view_index) in (('test-0002', 0),
                                            ('test-0003', 2)):
            raise TransportError('timeout')
        return super(FlakyGrounder, self).__call__(
            entry, image, dims, spec, prompt, view_index, temperature,
            purpose)


def _test_entries(n, seed):
    rng = np.random.default_rng(seed)
    entries = []
    for index in range(n):
        w, h = (int(v) for v in rng.integers(40, 61, 2))
        x1 = int(rng.integers(30, 256 - 30 - w))
        y1 = int(rng.integers(30, 256 - 30 - h))
        entries.append(ManifestEntry(
            image_id='test-{0:04d}'.format(index),
            image_path='/nonexistent/{0}.png'.format(index),
            ground_truth=[BoundingBox(x1, y1, x1 + w, y1 + h)],
            label='lesion', width=256, height=256))
    return DatasetManifest(entries)


def _sigmas(artifacts):
    return [d['sigma'] for row in artifacts.predictions
            for d in row['detections']]


def test_derive_seed():
    """Test that derived seeds are stable 64-bit integers."""
    expect(derive_seed(1, 'a', 0) == derive_seed(1, 'a', 0))
    expect(derive_seed(1, 'a', 0) != derive_seed(1, 'a', 1))
    expect(0 <= derive_seed('x') < 2 ** 64)
    assert_expectations()


def test_artifact_writer_truncates_on_first_write(tmp_path):
    """Test that a new writer replaces files of an earlier run."""
    (tmp_path / PREDICTIONS_FILE).write_text('stale\n')
    writer = ArtifactWriter(str(tmp_path))
    writer.append_jsonl(PREDICTIONS_FILE, [{'a': 1}])
    writer.append_jsonl(PREDICTIONS_FILE, [{'a': 2}])
    writer.write_json(REPORT_FILE, {'b': 1})
    writer.write_json(REPORT_FILE, {'b': 2})
    expect(read_jsonl(writer.path(PREDICTIONS_FILE)) == [{'a': 1}, {'a': 2}])
    expect(json.loads((tmp_path / REPORT_FILE).read_text()) == {'b': 2})
    expect(read_jsonl(str(tmp_path / 'missing.jsonl')) == [])
    assert_expectations()


def test_zero_noise_run(run_config, manifest):
    """Test that a noiseless mock run is perfect and fully confident."""
    artifacts = run_ddl(run_config, manifest)
    report = artifacts.report
    expect(report['metrics'] == pytest.approx(
        {'mAP@25': 1.0, 'mAP@50': 1.0, 'mAP@75': 1.0}))
    expect(all(s == pytest.approx(1.0) for s in _sigmas(artifacts)))
    expect(report['calibration']['mean_iou'] == pytest.approx(1.0))
    expect(report['counts']['evaluated'] == 4)
    expect(report['counts']['failed'] == 0)
    expect(report['config_hash'] == run_config.config_hash())
    for name in (CONFIG_FILE, HISTORY_FILE, PREDICTIONS_FILE, REPORT_FILE,
                 FAILURES_FILE, LOG_FILE):
        expect(os.path.exists(os.path.join(run_config.output_dir, name)))
    assert_expectations()


def test_prediction_records(run_config, manifest):
    """Test the serialized form of consolidated detections."""
    artifacts = run_ddl(run_config, manifest, prompt='find the lesion')
    rows = read_jsonl(os.path.join(run_config.output_dir, PREDICTIONS_FILE))
    first = rows[0]
    expect([r['image_id'] for r in rows] ==
           ['test-0002', 'test-0003', 'test-0004', 'test-0005'])
    expect(first['seed'] == 7)
    expect(first['detections'][0]['bbox'] == [60, 130, 110, 190])
    expect(first['detections'][0]['label'] == 'lesion')
    expect(rows == artifacts.predictions)
    assert_expectations()


def test_runs_are_reproducible(tmp_path, manifest):
    """Test that equal settings give byte-identical artifacts."""
    contents = []
    for name in ('a', 'b'):
        cfg = RunConfig(mock=True, seed=7, max_generations=1, workers=4,
                        jitter_px=3.0, hallucination_prob=0.3,
                        output_dir=str(tmp_path / name))
        run_ddl(cfg, manifest)
        contents.append([(tmp_path / name / f).read_bytes()
                         for f in (PREDICTIONS_FILE, HISTORY_FILE)])
    assert contents[0] == contents[1]


def test_request_budget_with_fixed_prompt(run_config, manifest):
    """Test M + 1 grounding calls per test image and no scoring calls."""
    grounder = MockGrounder(MockNoise(), 7)
    run_ddl(run_config, manifest, grounder=grounder, prompt='find it')
    expect(len(grounder.calls) == 4 * (run_config.m + 1))
    expect(all(c.purpose == PURPOSE_INFER for c in grounder.calls))
    expect(sorted(c.view_index for c in grounder.calls
                  if c.image_id == 'test-0002') == list(range(8)))
    assert_expectations()


def test_scoring_stays_on_dev_split(run_config, manifest):
    """Test that prompt scoring only ever sees development images."""
    grounder = MockGrounder(MockNoise(), 7)
    run_ddl(run_config, manifest, grounder=grounder)
    scoring = [c for c in grounder.calls if c.purpose == PURPOSE_SCORE]
    inference = [c for c in grounder.calls if c.purpose == PURPOSE_INFER]
    expect(scoring)
    expect(all(c.image_id.startswith('dev') for c in scoring))
    expect(all(c.view_index == 0 for c in scoring))
    expect(all(c.image_id.startswith('test') for c in inference))
    expect(len(inference) == 4 * (run_config.m + 1))
    assert_expectations()


def test_linguistic_mode_temperatures(run_config, manifest):
    """Test greedy reference calls and sampled identity views."""
    cfg = replace(run_config, uncertainty='linguistic')
    grounder = MockGrounder(MockNoise(), 7)
    run_ddl(cfg, manifest, grounder=grounder, prompt='find it')
    expect(all(c.temperature == 0.0 for c in grounder.calls
               if c.view_index == 0))
    expect(all(c.temperature == 1.0 for c in grounder.calls
               if c.view_index > 0))
    assert_expectations()


def test_failure_accounting(run_config, manifest):
    """Test that failed images are logged and excluded from metrics."""
    grounder = FlakyGrounder(MockNoise(), 7)
    artifacts = run_ddl(run_config, manifest, grounder=grounder,
                        prompt='find it')
    counts = artifacts.report['counts']
    failures = read_jsonl(os.path.join(run_config.output_dir,
                                       FAILURES_FILE))
    partial = [r for r in artifacts.predictions
               if r['image_id'] == 'test-0003'][0]
    expect(counts['images'] == 4)
    expect(counts['evaluated'] + counts['failed'] == 4)
    expect(counts['failed'] == 2)
    expect(counts['view_failures'] == 1)
    expect([(f['image_id'], f['stage']) for f in failures] ==
           [('test-0002', 'reference'), ('test-0005', 'load')])
    expect(artifacts.report['metrics']['mAP@50'] == pytest.approx(1.0))
    # Six of seven views matched.
    expect(partial['detections'][0]['sigma'] ==
           pytest.approx(0.6 * 7 / 8 + 0.4))
    assert_expectations()


def test_select_prompt_without_dev_split(run_config, manifest):
    """Test that a manifest without dev images keeps the vanilla prompt."""
    data = DatasetManifest(manifest.test)
    best, history = select_prompt(run_config, data, MockGrounder(MockNoise(),
                                                                 7))
    expect(best.text == vanilla_prompt())
    expect(best.origin == ORIGIN_VANILLA)
    expect(history is None)
    assert_expectations()


def test_uncertainty_comparison(tmp_path, manifest):
    """Test that view perturbations sharpen sigma over sampled decoding."""
    cfg = RunConfig(mock=True, seed=0, seeds=tuple(range(100)),
                    max_generations=0, workers=4, jitter_px=3.0,
                    sampling_jitter_px=6.0, consistent_jitter=True,
                    output_dir=str(tmp_path))
    comparison = run_uncertainty_mode(cfg, manifest)
    summary = json.loads((tmp_path / COMPARISON_FILE).read_text())
    true_sigma = summary['true_positive_sigma']
    expect(len(comparison.visual.report['per_seed']) == 100)
    expect(true_sigma['visual'] >= true_sigma['linguistic'])
    expect(summary['mean_sigma']['visual'] >
           summary['mean_sigma']['linguistic'])
    expect(summary['prompt'] == comparison.visual.prompt.text)
    expect(comparison.linguistic.prompt.text ==
           comparison.visual.prompt.text)
    expect((tmp_path / 'visual' / REPORT_FILE).exists())
    expect((tmp_path / 'linguistic' / REPORT_FILE).exists())
    assert_expectations()


def test_rhc_beats_simple_averaging_under_noise(tmp_path):
    """Test that reliability ranking pushes hallucinations down."""
    data = _test_entries(20, seed=3)
    metrics = {}
    for strategy in ('RHC', 'SA'):
        cfg = RunConfig(mock=True, seed=0, seeds=tuple(range(10)),
                        strategy=strategy, jitter_px=4.0,
                        hallucination_prob=0.2, workers=4,
                        output_dir=str(tmp_path / strategy))
        report = run_ddl(cfg, data, prompt='find it').report
        expect(len(report['per_seed']) == 10)
        metrics[strategy] = report['metrics']
    expect(metrics['RHC']['mAP@75'] >= metrics['SA']['mAP@75'])
    assert_expectations()


def test_sigma_filter_removes_hallucinations():
    """Test filtering at sigma 0.5 on boxes that move between views."""
    cfg = RunConfig(mock=True, seed=3, jitter_px=3.0, hallucination_prob=1.0)
    grounder = MockGrounder(cfg.noise(), 3)
    truth_sigma, other_sigma = [], []
    for entry in _test_entries(200, seed=4):
        result = infer_image(entry, grounder, 'find it', cfg, 3)
        for detection in result.detections:
            if iou(detection.box, entry.ground_truth[0]) >= 0.5:
                truth_sigma.append(detection.sigma)
            else:
                other_sigma.append(detection.sigma)
    kept = np.mean([s >= 0.5 for s in truth_sigma])
    removed = np.mean([s < 0.5 for s in other_sigma])
    expect(len(truth_sigma) >= 195)
    expect(len(other_sigma) >= 150)
    expect(kept >= 0.95)
    expect(removed >= 0.9)
    expect(np.mean(truth_sigma) > np.mean(other_sigma) + 0.3)
    assert_expectations()


class CountingGrounder(MockGrounder):
    """Mock grounder that runs views concurrently and tracks overlap."""

    concurrent = True

    def __init__(self, noise, seed):
        """Initialize the in-flight counters."""
        super(CountingGrounder, self).__init__(noise, seed)
        self.in_flight = 0
        self.peak = 0
        self._gauge = threading.Lock()

    def __call__(self, *args, **kwargs):
        """Ground one view while counting the requests in flight."""
        with self._gauge:
            self.in_flight += 1
            self.peak = max(self.peak, self.in_flight)
        try:
            time.sleep(0.002)
            return super(CountingGrounder, self).__call__(*args, **kwargs)
        finally:
            with self._gauge:
                self.in_flight -= 1


def test_parallelism_cap_bounds_requests(run_config, manifest):
    """Test that image and view workers share one request budget."""
    cfg = replace(run_config, workers=3)
    grounder = CountingGrounder(MockNoise(), 7)
    run_ddl(cfg, manifest, grounder=grounder, prompt='find it')
    expect(len(grounder.calls) == 4 * (cfg.m + 1))
    expect(1 <= grounder.peak <= 3)
    assert_expectations()


def test_gated_grounder_delegates(manifest):
    """Test that the gate forwards loading and keeps one wrapper."""
    inner = MockGrounder(MockNoise(), 7)
    gated = gate(inner, 2)
    entry = manifest.test[0]
    expect(gate(gated, 5) is gated)
    expect(gated.limit == 2)
    expect(gated.concurrent is False)
    expect(gated.dims(entry, gated.load(entry)) == entry.dims)
    found = gated(entry, None, entry.dims, TransformSpec.identity(), 'p')
    expect(found.boxes == entry.ground_truth)
    expect(len(inner.calls) == 1)
    assert_expectations()


def test_endpoint_grounder(tmp_path):
    """Test that the endpoint grounder renders and parses one view."""
    path = tmp_path / 'img.png'
    Image.new('L', (64, 48)).save(str(path))
    entry = ManifestEntry('a', str(path))
    client = mock.Mock()
    client.endpoint.normalized_range = 0
    client.complete.return_value = \
        '[{"bbox_2d": [10, 10, 30, 40], "label": "lesion"}]'
    grounder = EndpointGrounder(client)
    image = grounder.load(entry)
    found = grounder(entry, image, grounder.dims(entry, image),
                     TransformSpec.hflip(), 'find it', 3, 0.0)
    expect(found.view_index == 3)
    expect(found.boxes == [BoundingBox(10, 10, 30, 40)])
    expect(client.complete.call_args[1]['temperature'] == 0.0)
    assert_expectations()


def test_evaluate_predictions_with_baseline(manifest):
    """Test relative improvements over a baseline run."""
    def row(entry, found=True):
        boxes = [b.as_list(0) for b in entry.ground_truth] if found else []
        return {'image_id': entry.image_id, 'seed': 7,
                'detections': [{'bbox': b, 'sigma': 0.9} for b in boxes]}

    test = manifest.test
    rows = [row(e) for e in test]
    baseline = [row(e, found=i < 2) for i, e in enumerate(test)]
    report = evaluate_predictions(manifest, rows, baseline)
    expect(report['metrics']['mAP@50'] == pytest.approx(1.0))
    expect(report['baseline_metrics']['mAP@50'] == pytest.approx(0.5))
    expect(report['improvement'] == [('mAP@25', 100.0), ('mAP@50', 100.0),
                                     ('mAP@75', 100.0)])
    assert_expectations()


def test_evaluate_predictions_counts_missing_images(manifest):
    """Test that test images without a record count as failed."""
    rows = [{'image_id': e.image_id, 'seed': 1, 'detections': []}
            for e in manifest.test[:3]]
    counts = evaluate_predictions(manifest, rows)['counts']
    assert counts == {'images': 4, 'evaluated': 3, 'failed': 1}


def test_analyze_run(run_config, manifest):
    """Test the analysis written for a finished run."""
    run_ddl(replace(run_config, jitter_px=3.0), manifest)
    analysis = analyze_run(run_config.output_dir, manifest)
    with open(os.path.join(run_config.output_dir, ANALYSIS_FILE)) as fh:
        saved = json.load(fh)
    expect(saved['metrics'] == pytest.approx(analysis['metrics']))
    expect(analysis['trajectory'][0][0] == 0)
    expect(sorted(analysis) == ['calibration', 'kde', 'kde_by_generation',
                                'metrics', 'sigma', 'trajectory'])
    assert_expectations()
