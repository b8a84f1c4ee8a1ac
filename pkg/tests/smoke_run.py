#!/usr/bin/env python3
print('SMOKE TEST START')
import os
import sys
import pathlib
import tempfile
import json

# Ensure project root is on sys.path so `imabench` can be imported when running this script directly
ROOT = pathlib.Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT))

# tiny architecture BEFORE importing imabench so module-level config reads it
os.environ.setdefault('IMABENCH_FLOW_BLOCKS', '2')
os.environ.setdefault('IMABENCH_HIDDEN_WIDTH', '8')
os.environ.setdefault('IMABENCH_EVAL_SAMPLES', '500')
os.environ.setdefault('IMABENCH_EVAL_BATCH', '256')
os.environ.setdefault('IMABENCH_DARMOIS_NODES', '256')

from imabench.main import main

out = tempfile.mkdtemp(prefix='imabench-smoke-')
train_cfg = pathlib.Path(out) / 'train.json'
train_cfg.write_text(json.dumps({'train': {'iterations': 20, 'batch_size': 64, 'eval_every': 10}}))
suite_cfg = pathlib.Path(out) / 'suite.json'
suite_cfg.write_text(json.dumps({
    'n': 2,
    'layers': [2],
    'seeds': [0],
    'eval_samples': 500,
    'train': {'iterations': 10, 'batch_size': 64, 'eval_every': 5},
}))

mixing_path = str(pathlib.Path(out) / 'mixing_n2_L2_orthogonal_seed0.json')
steps = [
    ['--out', out, '--seed', '0', 'mixing', 'gen', '--n', '2', '--layers', '2', '--samples', '100'],
    ['--out', out, 'mixing', 'eval', '--mixing', mixing_path, '--samples', '200'],
    ['--out', out, 'cima', 'eval', '--mixing', mixing_path, '--samples', '200', '--profile', '9'],
    ['--out', out, '--config', str(train_cfg), 'train', '--mixing', mixing_path, '--reg-kind', 'cima', '--strength', '1'],
    ['--out', out, 'metrics', '--mixing', mixing_path, '--checkpoint', str(pathlib.Path(out) / 'flow_cima=1_checkpoint.json'),
     '--samples', '500', '--reg-kind', 'cima', '--strength', '1'],
    ['--out', out, '--config', str(train_cfg), 'darmois', 'train', '--mixing', mixing_path],
    ['--out', out, 'darmois', 'exact2d', '--mixing', mixing_path, '--samples', '500', '--nodes', '256'],
    ['--out', out, '--config', str(suite_cfg), 'suite', 'recovery'],
]

for argv in steps:
    code = main(argv)
    print(f'{" ".join(argv[2:5])} -> exit {code}')
    assert code == 0, argv

print('\nOutputs:')
for path in sorted(pathlib.Path(out).rglob('*')):
    if path.is_file():
        print('  ', path.relative_to(out))
print('SMOKE TEST END')
