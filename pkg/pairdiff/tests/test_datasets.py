import tempfile
from pathlib import Path

import numpy as np
import torch
from django.test import SimpleTestCase
from PIL import Image

from pairdiff.datasets import (
    DatasetError, GeneratedBatch, ImageMaskPair, export_generated, load_dataset, make_toy_dataset,
    prepare_eval_crops, resize_pair, write_dataset,
)
from pairdiff.storage import read_json


class ToyDatasetTest(SimpleTestCase):
    def test_pairs_are_well_formed(self):
        pairs = make_toy_dataset(6, 32, seed=0)
        self.assertEqual([p.id for p in pairs], [f"toy_{i:05d}" for i in range(6)])
        for pair in pairs:
            self.assertEqual(pair.image.shape, (3, 32, 32))
            self.assertTrue(((pair.mask == 0) | (pair.mask == 1)).all())
            self.assertGreater(float(pair.mask.sum()), 0)

    def test_heads_are_brighter_than_background(self):
        pair = make_toy_dataset(1, 32, seed=2)[0]
        inside = pair.image[:, pair.mask[0] == 1].mean()
        outside = pair.image[:, pair.mask[0] == 0].mean()
        self.assertGreater(float(inside), float(outside))

    def test_seed_determines_dataset(self):
        a, b = make_toy_dataset(3, 16, seed=5), make_toy_dataset(3, 16, seed=5)
        for pa, pb in zip(a, b):
            self.assertTrue(torch.equal(pa.image, pb.image))
        self.assertFalse(torch.equal(a[0].image, make_toy_dataset(1, 16, seed=6)[0].image))

    def test_minimum_size(self):
        with self.assertRaises(ValueError):
            make_toy_dataset(1, 8, seed=0)


class PairTest(SimpleTestCase):
    def test_invalid_pairs_rejected(self):
        with self.assertRaises(ValueError):
            ImageMaskPair(image=torch.zeros(3, 4, 4), mask=torch.full((1, 4, 4), 0.5))
        with self.assertRaises(ValueError):
            ImageMaskPair(image=torch.zeros(3, 4, 4), mask=torch.zeros(1, 4, 5))

    def test_resize_keeps_mask_binary(self):
        pair = make_toy_dataset(1, 32, seed=0)[0]
        small = resize_pair(pair, 16)
        self.assertEqual(small.size, (16, 16))
        self.assertTrue(((small.mask == 0) | (small.mask == 1)).all())
        self.assertIs(resize_pair(pair, 32), pair)


class DatasetFilesTest(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_written_dataset_loads_back(self):
        pairs = make_toy_dataset(3, 16, seed=0)
        write_dataset(pairs, self.root)
        loaded = load_dataset(self.root)
        self.assertEqual([p.id for p in loaded], [p.id for p in pairs])
        for original, read in zip(pairs, loaded):
            self.assertTrue(torch.equal(original.mask, read.mask))
            self.assertLessEqual(float((original.image - read.image).abs().max()), 1 / 255)

    def test_unmatched_files_are_excluded(self):
        write_dataset(make_toy_dataset(2, 16, seed=0), self.root)
        Image.fromarray(np.zeros((16, 16, 3), dtype=np.uint8)).save(self.root / 'images' / 'orphan.png')
        with self.assertLogs('pairdiff.datasets', level='WARNING') as logs:
            loaded = load_dataset(self.root)
        self.assertEqual(len(loaded), 2)
        self.assertIn('images/orphan.png', '\n'.join(logs.output))

    def test_size_mismatch_is_an_error(self):
        write_dataset(make_toy_dataset(1, 16, seed=0), self.root)
        Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(self.root / 'masks' / 'toy_00000.png')
        with self.assertRaises(DatasetError):
            load_dataset(self.root)

    def test_unreadable_file_is_an_error(self):
        write_dataset(make_toy_dataset(1, 16, seed=0), self.root)
        (self.root / 'images' / 'toy_00000.png').write_bytes(b'not a png')
        with self.assertRaises(DatasetError):
            load_dataset(self.root)

    def test_empty_directory_warns(self):
        with self.assertLogs('pairdiff.datasets', level='WARNING'):
            self.assertEqual(load_dataset(self.root), [])

    def test_export_binarizes_and_writes_manifest(self):
        masks = torch.tensor([0.5, 0.49, 0.9, 0.0]).reshape(1, 1, 2, 2)
        batch = GeneratedBatch(images=torch.rand(1, 3, 2, 2), masks=masks, ids=['g0'])
        manifest = export_generated(batch, self.root, metadata={'mode': 'ddim'})
        self.assertEqual(manifest['count'], 1)
        self.assertEqual(manifest['mode'], 'ddim')
        self.assertEqual(read_json(self.root / 'manifest.json')['ids'], ['g0'])

        written = np.asarray(Image.open(self.root / 'masks' / 'g0.png'))
        self.assertEqual(written.tolist(), [[255, 0], [255, 0]])


class EvalCropsTest(SimpleTestCase):
    def test_tiles_cover_the_source(self):
        pair = make_toy_dataset(1, 32, seed=0)[0]
        tiles = prepare_eval_crops([pair], crop=16, out_size=16)
        self.assertEqual(len(tiles), 4)
        top = torch.cat([tiles[0].image, tiles[1].image], dim=2)
        bottom = torch.cat([tiles[2].image, tiles[3].image], dim=2)
        self.assertTrue(torch.equal(torch.cat([top, bottom], dim=1), pair.image))
        self.assertEqual(tiles[1].id, 'toy_00000_r0_c1')

    def test_tiles_are_resized(self):
        tiles = prepare_eval_crops(make_toy_dataset(1, 32, seed=0), crop=16, out_size=8)
        self.assertTrue(all(t.size == (8, 8) for t in tiles))

    def test_indivisible_source_rejected(self):
        with self.assertRaises(ValueError):
            prepare_eval_crops(make_toy_dataset(1, 32, seed=0), crop=12, out_size=8)
