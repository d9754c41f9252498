from rest_framework import serializers

from .choices import PosteriorVariance, SamplerMode, SelectionStrategy, SkipFusion, Variant
from .models import Checkpoint, ExperimentRun


class GeneratorSectionSerializer(serializers.Serializer):
    """Paired generator architecture"""
    variant = serializers.ChoiceField(choices=Variant.choices, default=Variant.TWO_ENCODER)
    skip_fusion = serializers.ChoiceField(choices=SkipFusion.choices, default=SkipFusion.SCALE_U)
    base_channels = serializers.IntegerField(min_value=1, default=32)
    depth = serializers.IntegerField(min_value=1, default=3)
    attention_heads = serializers.IntegerField(min_value=1, default=4)
    image_channels = serializers.IntegerField(min_value=1, default=3)
    input_size = serializers.IntegerField(min_value=4, default=128)

    def validate(self, attrs):
        if attrs['base_channels'] % attrs['attention_heads']:
            raise serializers.ValidationError(
                {'attention_heads': f"must divide base_channels ({attrs['base_channels']})"}
            )
        if attrs['input_size'] % (2 ** attrs['depth']):
            raise serializers.ValidationError(
                {'input_size': f"must be divisible by 2**depth = {2 ** attrs['depth']}"}
            )
        return attrs


class TrainSectionSerializer(serializers.Serializer):
    batch_size = serializers.IntegerField(min_value=1, default=64)
    lr = serializers.FloatField(min_value=0.0, default=0.00021)
    epochs = serializers.IntegerField(min_value=1, default=1500)
    T = serializers.IntegerField(min_value=1, default=1000)
    beta_start = serializers.FloatField(min_value=0.0, default=1e-4)
    beta_end = serializers.FloatField(min_value=0.0, max_value=0.999, default=0.02)
    adv_weight = serializers.FloatField(min_value=0.0, default=0.25)
    use_discriminator = serializers.BooleanField(default=False)
    crop_size = serializers.IntegerField(min_value=1, default=512)
    train_size = serializers.IntegerField(min_value=1, default=128)
    split_ratio = serializers.FloatField(default=0.8)
    steps_per_epoch = serializers.IntegerField(min_value=1, allow_null=True, default=None)
    checkpoint_fraction = serializers.FloatField(default=0.05)
    grad_clip = serializers.FloatField(min_value=0.0, allow_null=True, default=None)
    posterior_variance = serializers.ChoiceField(choices=PosteriorVariance.choices, default=PosteriorVariance.BETA)
    num_workers = serializers.IntegerField(min_value=0, allow_null=True, default=None)

    def validate_split_ratio(self, value):
        if not 0 < value < 1:
            raise serializers.ValidationError("must be strictly between 0 and 1")
        return value

    def validate_checkpoint_fraction(self, value):
        if not 0 < value <= 1:
            raise serializers.ValidationError("must be in (0, 1]")
        return value

    def validate(self, attrs):
        if attrs['crop_size'] < attrs['train_size']:
            raise serializers.ValidationError({'crop_size': f"must be >= train_size ({attrs['train_size']})"})
        if attrs['beta_start'] <= 0 or attrs['beta_start'] > attrs['beta_end']:
            raise serializers.ValidationError({'beta_start': "must satisfy 0 < beta_start <= beta_end"})
        return attrs


class DiscriminatorSectionSerializer(serializers.Serializer):
    sigma = serializers.FloatField(min_value=0.0, default=20.0)
    alpha_epochs = serializers.FloatField(min_value=0.0, default=10.0)
    i0 = serializers.IntegerField(min_value=1, default=20)
    priority_until_epoch = serializers.IntegerField(min_value=0, default=500)
    ramp = serializers.BooleanField(default=True)


class SuperResSectionSerializer(serializers.Serializer):
    low_size = serializers.IntegerField(min_value=1, default=16)
    high_size = serializers.IntegerField(min_value=2, allow_null=True, default=None)
    steps_train = serializers.IntegerField(min_value=1, allow_null=True, default=None)
    steps_infer = serializers.IntegerField(min_value=1, default=100)
    infer_mode = serializers.ChoiceField(choices=SamplerMode.choices, default=SamplerMode.DDIM)
    base_channels = serializers.IntegerField(min_value=1, default=32)
    depth = serializers.IntegerField(min_value=1, default=2)
    attention_heads = serializers.IntegerField(min_value=1, default=4)
    epochs = serializers.IntegerField(min_value=1, allow_null=True, default=None)

    def validate(self, attrs):
        if attrs['high_size'] is not None and attrs['high_size'] != 2 * attrs['low_size']:
            raise serializers.ValidationError({'high_size': f"must be 2 * low_size ({2 * attrs['low_size']})"})
        return attrs


class SegmentationSectionSerializer(serializers.Serializer):
    encoder_widths = serializers.ListField(child=serializers.IntegerField(min_value=1), min_length=1,
                                           default=[16, 32, 64, 128])
    lr = serializers.FloatField(min_value=0.0, default=0.01)
    momentum = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.0)
    epochs = serializers.IntegerField(min_value=0, default=50)
    finetune_epochs = serializers.IntegerField(min_value=0, default=10)
    batch_size = serializers.IntegerField(min_value=1, default=16)
    dice_weight = serializers.FloatField(min_value=0.0, default=1.0)
    bce_weight = serializers.FloatField(min_value=0.0, default=1.0)
    smooth = serializers.FloatField(min_value=0.0, default=1.0)
    threshold = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.5)


class SamplingSectionSerializer(serializers.Serializer):
    n = serializers.IntegerField(min_value=1, default=64)
    mode = serializers.ChoiceField(choices=SamplerMode.choices, default=SamplerMode.DDIM)
    steps = serializers.IntegerField(min_value=1, default=100)
    batch_size = serializers.IntegerField(min_value=1, default=16)
    threshold = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.5)
    strategy = serializers.ChoiceField(choices=SelectionStrategy.choices, default=SelectionStrategy.BEST_VAL_LOSS)
    score_samples = serializers.IntegerField(min_value=1, default=64)
    score_mode = serializers.ChoiceField(choices=SamplerMode.choices, default=SamplerMode.DDPM)
    score_steps = serializers.IntegerField(min_value=1, allow_null=True, default=None)
    histogram_bins = serializers.IntegerField(min_value=2, default=256)


class DataSectionSerializer(serializers.Serializer):
    train_root = serializers.CharField(allow_blank=True, default='')
    finetune_root = serializers.CharField(allow_blank=True, default='')
    test_root = serializers.CharField(allow_blank=True, default='')
    toy_n = serializers.IntegerField(min_value=1, default=500)
    toy_test_n = serializers.IntegerField(min_value=1, default=100)
    toy_size = serializers.IntegerField(min_value=16, default=32)
    eval_crop = serializers.IntegerField(min_value=0, default=0)


class PipelineSectionSerializer(serializers.Serializer):
    n_generated = serializers.IntegerField(min_value=1, default=500)
    strategies = serializers.ListField(child=serializers.ChoiceField(choices=SelectionStrategy.choices),
                                       min_length=1, default=list(SelectionStrategy.values))
    superres = serializers.BooleanField(default=True)
    finetune = serializers.BooleanField(default=False)


class ExperimentConfigSerializer(serializers.Serializer):
    """Whole experiment document; every section is optional and filled with defaults"""
    name = serializers.SlugField(max_length=100)
    seed = serializers.IntegerField(min_value=0, default=0)
    output_root = serializers.CharField(allow_blank=True, default='')
    generator = GeneratorSectionSerializer()
    train = TrainSectionSerializer()
    discriminator = DiscriminatorSectionSerializer()
    superres = SuperResSectionSerializer()
    segmentation = SegmentationSectionSerializer()
    sampling = SamplingSectionSerializer()
    data = DataSectionSerializer()
    pipeline = PipelineSectionSerializer()

    SECTIONS = ('generator', 'train', 'discriminator', 'superres', 'segmentation', 'sampling', 'data', 'pipeline')

    def to_internal_value(self, data):
        if isinstance(data, dict):
            data = {**{section: {} for section in self.SECTIONS}, **data}
        return super().to_internal_value(data)

    def validate(self, attrs):
        generator, train, sampling = attrs['generator'], attrs['train'], attrs['sampling']
        errors = {}
        if generator['input_size'] != train['train_size']:
            errors['generator'] = {'input_size': f"must equal train.train_size ({train['train_size']})"}
        if sampling['steps'] > train['T']:
            errors['sampling'] = {'steps': f"cannot exceed train.T ({train['T']})"}
        elif sampling['mode'] == SamplerMode.DDPM and sampling['steps'] != train['T']:
            errors['sampling'] = {'steps': f"ddpm sampling visits every timestep: must equal train.T ({train['T']})"}
        if sampling['score_steps'] is not None and sampling['score_steps'] > train['T']:
            errors.setdefault('sampling', {})['score_steps'] = f"cannot exceed train.T ({train['T']})"
        if attrs['pipeline']['superres'] and attrs['superres']['low_size'] != generator['input_size']:
            errors['superres'] = {'low_size': f"must equal generator.input_size ({generator['input_size']})"}
        if attrs['superres']['steps_infer'] > (attrs['superres']['steps_train'] or train['T']):
            errors.setdefault('superres', {})['steps_infer'] = "cannot exceed the super-resolution T"
        if errors:
            raise serializers.ValidationError(errors)
        return attrs


class CheckpointManifestSerializer(serializers.Serializer):
    """Validates manifest.json files before they are mirrored into the ledger"""
    epoch = serializers.IntegerField(min_value=0)
    weights_uri = serializers.CharField()
    val_loss = serializers.FloatField()
    mean_jsd = serializers.FloatField(allow_null=True, required=False, default=None)
    config_hash = serializers.CharField(allow_blank=True, required=False, default='')
    scoring = serializers.JSONField(allow_null=True, required=False, default=None)


class CheckpointSerializer(serializers.ModelSerializer):
    class Meta:
        model = Checkpoint
        fields = ['id', 'epoch', 'weights_uri', 'val_loss', 'mean_jsd', 'scoring', 'created_at']
        read_only_fields = ['id', 'created_at']


class ExperimentRunSerializer(serializers.ModelSerializer):
    """Run with its checkpoints, as printed by ``select --json``"""
    checkpoints = CheckpointSerializer(many=True, read_only=True)

    class Meta:
        model = ExperimentRun
        fields = [
            'id', 'name', 'flavor', 'with_discriminator', 'seed', 'config_hash',
            'run_dir', 'status', 'checkpoints', 'created_at', 'updated_at'
        ]
        read_only_fields = fields
