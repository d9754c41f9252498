import json
import tempfile
from pathlib import Path

from django.conf import settings
from django.test import SimpleTestCase, override_settings

from pairdiff.config import ConfigError, build_config, flatten_errors, load_config, read_document

from .helpers import tiny_document


class ConfigLoadingTest(SimpleTestCase):
    def test_toy_config_loads(self):
        experiment = load_config(Path(settings.BASE_DIR) / 'configs' / 'toy.toml')
        self.assertEqual(experiment.name, 'toy')
        self.assertEqual(experiment.generator.input_size, experiment.train.train_size)
        self.assertEqual(experiment.generator.num_timesteps, experiment.train.T)
        self.assertEqual(experiment.superres.high_size, 2 * experiment.superres.low_size)
        self.assertEqual(experiment.discriminator.T, experiment.train.T)

    def test_minimal_document_takes_defaults(self):
        experiment = build_config({'name': 'minimal', 'superres': {'low_size': 128}})
        self.assertEqual(experiment.seed, 0)
        self.assertEqual(experiment.generator.variant, 'two_encoder')
        self.assertEqual(experiment.generator.skip_fusion, 'scale_u')
        self.assertEqual(experiment.train.T, 1000)
        self.assertEqual(experiment.superres.steps_train, 1000)
        self.assertEqual(experiment.sr_epochs, experiment.train.epochs)
        self.assertEqual(experiment.sampling.mode, 'ddim')
        self.assertEqual(experiment.output_root, Path(settings.PAIRDIFF_OUTPUT_ROOT))

    def test_seed_reaches_every_section(self):
        experiment = build_config(tiny_document(seed=7))
        self.assertEqual(experiment.train.seed, 7)

    def test_json_document_and_seed_override(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'experiment.json'
            path.write_text(json.dumps(tiny_document(data={'train_root': 'data/train'})))
            experiment = load_config(path, seed=5)
            self.assertEqual(experiment.seed, 5)
            self.assertEqual(experiment.data.train_root, path.resolve().parent / 'data' / 'train')

    def test_missing_or_broken_file(self):
        with self.assertRaises(ConfigError):
            read_document('/nonexistent/experiment.toml')
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'broken.toml'
            path.write_text('name = ')
            with self.assertRaises(ConfigError):
                read_document(path)

    @override_settings(PAIRDIFF_NUM_WORKERS=3)
    def test_num_workers_falls_back_to_settings(self):
        self.assertEqual(build_config(tiny_document()).train.num_workers, 3)
        self.assertEqual(build_config(tiny_document(train={'num_workers': 1})).train.num_workers, 1)


class ConfigValidationTest(SimpleTestCase):
    def assertConfigError(self, document, prefix):
        with self.assertRaises(ConfigError) as ctx:
            build_config(document)
        self.assertTrue(any(error.startswith(prefix) for error in ctx.exception.errors), ctx.exception.errors)

    def test_errors_name_section_and_field(self):
        self.assertConfigError(tiny_document(train={'split_ratio': 1.5}), 'train.split_ratio:')
        self.assertConfigError(tiny_document(generator={'variant': 'three_encoder'}), 'generator.variant:')
        self.assertConfigError(tiny_document(train={'checkpoint_fraction': 0}), 'train.checkpoint_fraction:')

    def test_generator_must_match_training_size(self):
        self.assertConfigError(tiny_document(generator={'input_size': 16}), 'generator.input_size:')

    def test_sampling_steps_are_bounded(self):
        self.assertConfigError(tiny_document(sampling={'steps': 21}), 'sampling.steps:')
        self.assertConfigError(tiny_document(sampling={'mode': 'ddpm', 'steps': 10}), 'sampling.steps:')
        build_config(tiny_document(sampling={'mode': 'ddpm', 'steps': 20}))

    def test_attention_heads_must_divide_channels(self):
        self.assertConfigError(tiny_document(generator={'attention_heads': 3}), 'generator.attention_heads:')

    def test_superres_input_follows_generator(self):
        self.assertConfigError(tiny_document(superres={'low_size': 16}), 'superres.low_size:')

    def test_name_is_required(self):
        document = tiny_document()
        del document['name']
        self.assertConfigError(document, 'name:')

    def test_flatten_errors(self):
        errors = flatten_errors({'train': {'lr': ['bad']}, 'non_field_errors': ['broken'],
                                 'pipeline': {'strategies': {0: ['unknown']}}})
        self.assertIn('train.lr: bad', errors)
        self.assertIn('config: broken', errors)
        self.assertIn('pipeline.strategies.0: unknown', errors)


class ConfigIdentityTest(SimpleTestCase):
    def test_hash_is_stable_and_sensitive(self):
        a, b = build_config(tiny_document()), build_config(tiny_document())
        self.assertEqual(a.config_hash, b.config_hash)
        self.assertNotEqual(a.config_hash, build_config(tiny_document(seed=1)).config_hash)

    def test_overrides_rename_the_run(self):
        experiment = build_config(tiny_document(name='toy'))
        self.assertEqual(experiment.run_name, 'toy-concat')
        shared = experiment.with_overrides(flavor='shared_encoder', with_discriminator=True)
        self.assertEqual(shared.run_name, 'toy-shared_encoder-disc')
        self.assertTrue(shared.train.use_discriminator)
        self.assertNotEqual(shared.config_hash, experiment.config_hash)
        self.assertEqual(experiment.with_overrides(seed=0).config_hash, experiment.config_hash)

    def test_run_dir_lives_under_output_root(self):
        experiment = build_config(tiny_document(name='toy', output_root='/tmp/runs'))
        self.assertEqual(experiment.run_dir(), Path('/tmp/runs/run/toy-concat'))
