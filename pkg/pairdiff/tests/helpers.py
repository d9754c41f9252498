"""Shared fixtures for the test suite"""
from pathlib import Path

import numpy as np
import torch

from pairdiff.config import build_config
from pairdiff.generator import PairedGeneratorConfig


def tiny_generator_config(variant='concat', skip_fusion='direct', size=8, depth=2, T=20):
    return PairedGeneratorConfig(variant=variant, skip_fusion=skip_fusion, base_channels=8, depth=depth,
                                 attention_heads=2, image_channels=3, input_size=size, num_timesteps=T)


def tiny_document(name='unit', seed=0, **sections):
    """A small but complete experiment document; ``sections`` replace defaults per section"""
    document = {
        'name': name,
        'seed': seed,
        'generator': {'variant': 'concat', 'skip_fusion': 'direct', 'base_channels': 8, 'depth': 2,
                      'attention_heads': 2, 'input_size': 8},
        'train': {'batch_size': 4, 'epochs': 2, 'T': 20, 'crop_size': 16, 'train_size': 8,
                  'checkpoint_fraction': 0.5},
        'superres': {'low_size': 8, 'base_channels': 8, 'depth': 2, 'attention_heads': 2, 'steps_infer': 5,
                     'epochs': 1},
        'segmentation': {'encoder_widths': [4, 8], 'epochs': 1, 'finetune_epochs': 1, 'batch_size': 4},
        'sampling': {'n': 4, 'mode': 'ddim', 'steps': 5, 'batch_size': 4, 'score_samples': 4,
                     'score_mode': 'ddim', 'score_steps': 5, 'histogram_bins': 16},
        'data': {'toy_n': 12, 'toy_test_n': 4, 'toy_size': 16},
        'pipeline': {'n_generated': 4, 'strategies': ['best_val_loss'], 'superres': True},
    }
    for section, values in sections.items():
        if isinstance(values, dict) and isinstance(document.get(section), dict):
            document[section] = {**document[section], **values}
        else:
            document[section] = values
    return document


def tiny_experiment(output_root, **sections):
    document = tiny_document(**sections)
    document['output_root'] = str(output_root)
    return build_config(document, base_dir=Path(output_root))


def gradient_check(loss_fn, parameters, n_samples=10, h=1e-5, seed=0):
    """
    Central-difference check of ``loss_fn``'s gradient on ``n_samples``
    random entries of ``parameters``. Returns (analytic, numeric) pairs.
    """
    params = [p for p in parameters if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]

    rng = np.random.default_rng(seed)
    results = []
    with torch.no_grad():
        for _ in range(n_samples):
            index = int(rng.integers(len(params)))
            flat = params[index].data.view(-1)
            entry = int(rng.integers(flat.numel()))
            original = float(flat[entry])
            flat[entry] = original + h
            plus = float(loss_fn())
            flat[entry] = original - h
            minus = float(loss_fn())
            flat[entry] = original
            results.append((float(analytic[index].view(-1)[entry]), (plus - minus) / (2 * h)))
    return results


def assert_gradients_close(testcase, results, rtol=1e-3, atol=1e-8):
    for analytic, numeric in results:
        testcase.assertLessEqual(abs(analytic - numeric), rtol * max(abs(analytic), abs(numeric)) + atol,
                                 f"analytic {analytic} vs numeric {numeric}")
