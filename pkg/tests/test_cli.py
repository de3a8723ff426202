"""
Command line surface
"""
import json

import numpy as np
import pytest

from fcnn import build_network, load_checkpoint, save_checkpoint
from fcnn._checkpoint import checkpoint_header
from fcnn._cli import main, parse_checkpoints, parse_sizes, parse_split
from fcnn._exceptions import ConfigError
from fcnn._scenedata import write_frame, write_pgm
from fcnn.testing import fcnn_test

SMALL_SPEC = (
    "Conv(4,3,1) - ReLU - Pool(MAX,2,2) - Conv(4,3,1) - ReLU - "
    "Pool(MAX,2,2) - Conv(4,3,1) - ReLU - Conv(1,1,1) - Sig"
)
TRAIN_FLAGS = [
    '--spec', SMALL_SPEC, '--iters', '2', '--crop', '32',
    '--crops-per-frame', '1', '--batch-size', '2', '--lr', '0.05',
]


@pytest.fixture
def manifest(tiny_dataset):
    return f"{tiny_dataset.root}/manifest.json"


@pytest.fixture
def appearance_ckpt(tmp_path, manifest):
    out = tmp_path / 'model'
    assert main(['train', '--manifest', manifest, '--out', str(out),
                 '--deterministic', *TRAIN_FLAGS]) == 0
    return out / 'appearance.ckpt'


def test_rf_table(capsys):
    assert main(['rf']) == 0
    out = capsys.readouterr().out
    assert 'R=54' in out
    assert 'stride=4' in out


def test_argument_parsers():
    assert parse_split('0.8') == {'train': 0.8, 'test': pytest.approx(0.2)}
    assert parse_split('train=0.6,val=0.2,test=0.2') == {
        'train': 0.6, 'val': 0.2, 'test': 0.2}
    assert parse_sizes('112x112, 64x96') == [(112, 112), (64, 96)]
    assert parse_checkpoints(['m.ckpt', 'motion=a.ckpt']) == {
        'model': 'm.ckpt', 'motion': 'a.ckpt'}
    for bad in ('1.5', 'train=x'):
        with pytest.raises(ConfigError):
            parse_split(bad)
    with pytest.raises(ConfigError):
        parse_sizes('axb')
    with pytest.raises(ConfigError):
        parse_checkpoints(['=a.ckpt'])


@fcnn_test
def test_gen_data_split_and_reproducible(tmp_path, capsys):
    args = ['gen-data', '--scenes', '10', '--clips-per-scene', '1',
            '--height', '56', '--width', '56', '--frames', '3',
            '--seed', '2']
    assert main([*args, '--out', str(tmp_path / 'a')]) == 0
    out = capsys.readouterr().out
    assert 'scenes: train=8 test=2' in out
    assert 'clips: 10' in out
    assert main([*args, '--out', str(tmp_path / 'b')]) == 0
    assert (tmp_path / 'a' / 'manifest.json').read_bytes() == \
        (tmp_path / 'b' / 'manifest.json').read_bytes()


@pytest.mark.parametrize('flag', ['--scenes', '--clips-per-scene'])
def test_gen_data_rejects_zero(tmp_path, flag):
    with pytest.raises(SystemExit) as exc:
        main(['gen-data', flag, '0', '--out', str(tmp_path)])
    assert exc.value.code == 2


def test_decision_fusion_needs_branches(tmp_path, capsys, manifest):
    code = main(['train', '--scheme', 'decision', '--manifest', manifest,
                 '--out', str(tmp_path)])
    assert code == 1
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1
    assert err.startswith('ConfigError:')
    assert 'missing --checkpoint for appearance, motion, structure' in err


def test_missing_manifest(tmp_path, capsys):
    assert main(['train', '--out', str(tmp_path)]) == 1
    assert 'needs --manifest' in capsys.readouterr().err


def test_train_writes_checkpoint_and_losses(capsys, appearance_ckpt):
    out = capsys.readouterr().out
    assert 'loss: first' in out
    assert 'saved:' in out
    net = load_checkpoint(str(appearance_ckpt))
    assert net.input_channels == 1
    lines = (appearance_ckpt.parent / 'appearance-loss.csv') \
        .read_text().splitlines()
    assert lines[:2] == ['# seed=0', 'iter,stage,loss']
    # two stages plus the fine-tune, two iterations each
    assert len(lines) == 2 + 3 * 2


def test_train_is_deterministic(tmp_path, manifest, appearance_ckpt):
    again = tmp_path / 'again'
    assert main(['train', '--manifest', manifest, '--out', str(again),
                 '--deterministic', *TRAIN_FLAGS]) == 0
    assert (again / 'appearance.ckpt').read_bytes() == \
        appearance_ckpt.read_bytes()


def test_infer_on_images(tmp_path, appearance_ckpt, capsys, rng):
    frame = tmp_path / 'street.pgm'
    write_pgm(str(frame), rng.random((1, 32, 48)))
    out = tmp_path / 'infer'
    assert main(['infer', '--checkpoint', str(appearance_ckpt),
                 '--image', str(frame), '--out', str(out)]) == 0
    assert 'street: 32x48 -> 8x12' in capsys.readouterr().out
    assert (out / 'street_prob.pgm').exists()
    assert (out / 'street_overlay.ppm').exists()


def test_infer_non_divisible_image(tmp_path, appearance_ckpt, capsys, rng):
    frame = tmp_path / 'odd.pgm'
    write_pgm(str(frame), rng.random((1, 30, 32)))
    assert main(['infer', '--checkpoint', str(appearance_ckpt),
                 '--image', str(frame), '--out', str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert 'ShapeError' in err and 'divisible' in err


def test_infer_on_manifest_split(tmp_path, appearance_ckpt, manifest):
    out = tmp_path / 'infer'
    assert main(['infer', '--checkpoint', str(appearance_ckpt),
                 '--manifest', manifest, '--out', str(out)]) == 0
    assert len(list(out.glob('*_prob.pgm'))) == 1


def test_eval_ideal(tmp_path, manifest, capsys):
    out = tmp_path / 'eval'
    assert main(['eval', '--predictor', 'ideal', '--manifest', manifest,
                 '--out', str(out), '--seed', '5']) == 0
    assert 'AUC 1.0000 (ideal, pixel)' in capsys.readouterr().out
    data = json.loads((out / 'auc.json').read_text())
    assert data['pooled_auc'] == 1.0 and data['seed'] == 5
    assert (out / 'roc.csv').read_text().startswith('# seed=5\n')


def test_eval_model(tmp_path, manifest, appearance_ckpt, capsys):
    assert main(['eval', '--checkpoint', str(appearance_ckpt),
                 '--manifest', manifest, '--out', str(tmp_path)]) == 0
    auc = float(capsys.readouterr().out.split()[1])
    assert 0.0 <= auc <= 1.0


def test_bench(tmp_path, capsys):
    assert main(['bench', '--spec', SMALL_SPEC, '--sizes', '16x16',
                 '--reps', '1', '--batch', '8', '--out', str(tmp_path)]) == 0
    rows = (tmp_path / 'benchmark.csv').read_text().splitlines()
    assert rows[1].startswith('height,width,mode')
    assert [r.split(',')[2] for r in rows[2:]] == ['full', 'scan']
    assert '16x16 scan' in capsys.readouterr().out


def test_bad_spec_is_one_line(capsys):
    assert main(['rf', '--spec', 'Conv(4,3)']) == 1
    err = capsys.readouterr().err
    assert err.startswith('SpecError:')
    assert len(err.strip().splitlines()) == 1



def test_non_finite_weights_are_one_line(tmp_path, capsys):
    net = build_network(SMALL_SPEC)
    net.params[0].weights[:] = np.nan
    path = tmp_path / 'broken.ckpt'
    save_checkpoint(net, str(path))
    assert main(['bench', '--checkpoint', str(path), '--sizes', '16x16',
                 '--reps', '1', '--out', str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert err.startswith('NumericalError:')
    assert len(err.strip().splitlines()) == 1


def test_hard_band_is_validated(tmp_path, capsys, manifest):
    assert main(['train', '--manifest', manifest, '--out', str(tmp_path),
                 '--hard-band', '0.9', *TRAIN_FLAGS]) == 1
    assert capsys.readouterr().err.startswith('ConfigError:')


@fcnn_test
def test_color_frames_end_to_end(tmp_path, capsys, rng):
    data = tmp_path / 'color'
    assert main(['gen-data', '--scenes', '3', '--clips-per-scene', '1',
                 '--height', '56', '--width', '56', '--frames', '3',
                 '--split', '0.67', '--color', '--out', str(data)]) == 0
    manifest = str(data / 'manifest.json')
    entry = json.loads((data / 'manifest.json').read_text())['clips'][0]
    assert entry['frames'][0].endswith('.ppm')

    out = tmp_path / 'model'
    assert main(['train', '--manifest', manifest, '--out', str(out),
                 *TRAIN_FLAGS]) == 0
    ckpt = out / 'appearance.ckpt'
    assert load_checkpoint(str(ckpt)).input_channels == 3
    assert checkpoint_header(str(ckpt))['extra']['channels'] == [3]
    assert main(['train', '--manifest', manifest, '--out', str(out),
                 '--scheme', 'input', *TRAIN_FLAGS]) == 0
    assert load_checkpoint(str(out / 'input.ckpt')).input_channels == 5

    frame = tmp_path / 'street.ppm'
    write_frame(str(frame), rng.random((3, 32, 48)))
    capsys.readouterr()
    assert main(['infer', '--checkpoint', str(ckpt), '--image', str(frame),
                 '--out', str(tmp_path / 'infer')]) == 0
    assert 'street: 32x48 -> 8x12' in capsys.readouterr().out
    assert main(['infer', '--checkpoint', str(out / 'input.ckpt'),
                 '--manifest', manifest, '--out', str(tmp_path / 'all')]) == 0
    assert len(list((tmp_path / 'all').glob('*_overlay.ppm'))) == 1
