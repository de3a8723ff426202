"""
End to end: generate, train every cue, fuse, infer and evaluate
"""
import json

import pytest

from fcnn import load_fusion
from fcnn._cli import main
from fcnn.testing import fcnn_test

SPEC = (
    "Conv(4,5,1) - ReLU - Pool(MAX,2,2) - Conv(6,5,1) - ReLU - "
    "Pool(MAX,2,2) - Conv(6,3,1) - ReLU - Conv(4,3,1) - ReLU - "
    "Conv(1,1,1) - Sig"
)
TRAIN = ['--spec', SPEC, '--iters', '20', '--crop', '32',
         '--crops-per-frame', '2', '--batch-size', '4', '--lr', '0.05',
         '--deterministic']


def run_pipeline(root):
    data, models = root / 'data', root / 'models'
    assert main(['gen-data', '--scenes', '5', '--clips-per-scene', '1',
                 '--height', '64', '--width', '64', '--frames', '6',
                 '--split', 'train=0.6,val=0.2,test=0.2', '--seed', '11',
                 '--out', str(data), '--deterministic']) == 0
    manifest = str(data / 'manifest.json')

    checkpoints = []
    for cue in ('appearance', 'motion', 'structure'):
        assert main(['train', '--cue', cue, '--manifest', manifest,
                     '--out', str(models), *TRAIN]) == 0
        checkpoints += ['--checkpoint', f"{cue}={models / cue}.ckpt"]
    assert main(['train', '--scheme', 'input', '--manifest', manifest,
                 '--out', str(models), *TRAIN]) == 0
    for scheme in ('decision', 'feature'):
        assert main(['train', '--scheme', scheme, '--manifest', manifest,
                     '--out', str(models), *checkpoints, *TRAIN]) == 0

    for scheme, ckpt in (('decision', 'decision'), ('feature', 'feature'),
                         ('input', 'input.ckpt')):
        assert main(['eval', '--checkpoint', str(models / ckpt),
                     '--manifest', manifest, '--out', str(root / scheme),
                     '--deterministic']) == 0
    assert main(['infer', '--checkpoint', str(models / 'decision'),
                 '--manifest', manifest, '--split', 'val',
                 '--out', str(root / 'infer'), '--deterministic']) == 0
    return models


@pytest.mark.slow
@fcnn_test
def test_pipeline_is_reproducible(tmp_path, capsys):
    first = run_pipeline(tmp_path / 'first')
    second = run_pipeline(tmp_path / 'second')

    for name in ('appearance.ckpt', 'motion.ckpt', 'structure.ckpt',
                 'appearance-loss.csv', 'decision-loss.csv'):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    for scheme in ('decision', 'feature', 'input'):
        a = json.loads((tmp_path / 'first' / scheme / 'auc.json').read_text())
        b = json.loads((tmp_path / 'second' / scheme / 'auc.json').read_text())
        assert a == b
        assert 0.0 <= a['pooled_auc'] <= 1.0

    mbn = load_fusion(str(first / 'decision'))
    assert mbn.names == ['appearance', 'motion', 'structure']
    assert list((tmp_path / 'first' / 'infer').glob('*_overlay.ppm'))


RANKING_SPEC = (
    "Conv(8,7,1) - ReLU - Pool(MAX,2,2) - Conv(16,7,1) - ReLU - "
    "Pool(MAX,2,2) - Conv(16,3,1) - ReLU - Conv(8,3,1) - ReLU - "
    "Conv(1,1,1) - Sig"
)
RANKING_TRAIN = ['--spec', RANKING_SPEC, '--iters', '300', '--crop', '48',
                 '--crops-per-frame', '6', '--batch-size', '8',
                 '--lr', '0.05', '--seed', '3', '--deterministic']


def _pooled_auc(root, name, *args):
    out = root / 'eval' / name
    assert main(['eval', *args, '--out', str(out), '--deterministic']) == 0
    return json.loads((out / 'auc.json').read_text())['pooled_auc']


@pytest.mark.slow
@fcnn_test
def test_fcnn_ranking_on_twelve_scenes(tmp_path):
    data, models = tmp_path / 'data', tmp_path / 'models'
    assert main(['gen-data', '--scenes', '12', '--clips-per-scene', '1',
                 '--split', '0.8', '--seed', '3', '--frames', '6',
                 '--out', str(data), '--deterministic']) == 0
    manifest = str(data / 'manifest.json')
    assert json.loads((data / 'manifest.json').read_text())['seed'] == 3

    checkpoints = []
    for cue in ('appearance', 'motion', 'structure'):
        assert main(['train', '--cue', cue, '--manifest', manifest,
                     '--out', str(models), *RANKING_TRAIN]) == 0
        checkpoints += ['--checkpoint', f"{cue}={models / cue}.ckpt"]
    assert main(['train', '--scheme', 'input', '--manifest', manifest,
                 '--out', str(models), *RANKING_TRAIN]) == 0
    for scheme in ('decision', 'feature'):
        assert main(['train', '--scheme', scheme, '--manifest', manifest,
                     '--out', str(models), *checkpoints,
                     *RANKING_TRAIN]) == 0

    aucs = {'intensity': _pooled_auc(
        tmp_path, 'intensity', '--predictor', 'intensity',
        '--manifest', manifest)}
    for name, ckpt in (('appearance', 'appearance.ckpt'),
                       ('motion', 'motion.ckpt'),
                       ('structure', 'structure.ckpt'),
                       ('input', 'input.ckpt'),
                       ('decision', 'decision'),
                       ('feature', 'feature')):
        aucs[name] = _pooled_auc(
            tmp_path, name, '--checkpoint', str(models / ckpt),
            '--manifest', manifest)
    (tmp_path / 'aucs.json').write_text(json.dumps(aucs, indent=2))
    print(json.dumps(aucs, indent=2, sort_keys=True))

    for name, auc in aucs.items():
        if name != 'intensity':
            assert auc > aucs['intensity'], name
    best_branch = max(aucs[c] for c in ('appearance', 'motion', 'structure'))
    for scheme in ('input', 'decision', 'feature'):
        assert aucs[scheme] >= best_branch - 0.02, scheme
