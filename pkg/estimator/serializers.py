from rest_framework import serializers


class PipelineConfigSerializer(serializers.Serializer):
    """Validates a fully resolved pipeline configuration (values may arrive as strings)."""
    # Paths and reproducibility
    seed = serializers.IntegerField(min_value=0)
    threads = serializers.IntegerField(min_value=1, max_value=256)
    dataset_root = serializers.CharField(max_length=4096)
    output_dir = serializers.CharField(max_length=4096)
    backbone_weights = serializers.CharField(max_length=4096, allow_blank=True)
    detector_weights = serializers.CharField(max_length=4096, allow_blank=True)
    width_divisor = serializers.IntegerField(min_value=1, max_value=64)

    # Face detector
    min_face = serializers.FloatField(min_value=12.0)
    pyramid_factor = serializers.FloatField()
    pnet_threshold = serializers.FloatField(min_value=0.0, max_value=1.0)
    rnet_threshold = serializers.FloatField(min_value=0.0, max_value=1.0)
    onet_threshold = serializers.FloatField(min_value=0.0, max_value=1.0)
    chip_size = serializers.IntegerField(min_value=12, max_value=4096)
    detect_on_predict = serializers.BooleanField()

    # Data preparation and augmentation
    split_ratio = serializers.FloatField()
    rotation_degrees = serializers.FloatField(min_value=0.0, max_value=45.0)
    flip_probability = serializers.FloatField(min_value=0.0, max_value=1.0)
    mean_r = serializers.FloatField(min_value=0.0, max_value=255.0)
    mean_g = serializers.FloatField(min_value=0.0, max_value=255.0)
    mean_b = serializers.FloatField(min_value=0.0, max_value=255.0)

    # Training
    epochs = serializers.IntegerField(min_value=0)
    batch_size = serializers.IntegerField(min_value=1)
    learning_rate = serializers.FloatField(min_value=0.0)
    beta1 = serializers.FloatField(min_value=0.0)
    beta2 = serializers.FloatField(min_value=0.0)
    epsilon = serializers.FloatField()
    dropout_rate = serializers.FloatField(min_value=0.0)
    checkpoint_every = serializers.IntegerField(min_value=0)

    def validate_width_divisor(self, value):
        if 64 % value:
            raise serializers.ValidationError("Must divide 64 so every backbone layer keeps whole channels")
        return value

    def validate_pyramid_factor(self, value):
        if not 0.0 < value < 1.0:
            raise serializers.ValidationError("Must lie strictly between 0 and 1")
        return value

    def validate_split_ratio(self, value):
        if not 0.0 < value < 1.0:
            raise serializers.ValidationError("Must lie strictly between 0 and 1")
        return value

    def validate_beta1(self, value):
        if value >= 1.0:
            raise serializers.ValidationError("Must be below 1")
        return value

    def validate_beta2(self, value):
        if value >= 1.0:
            raise serializers.ValidationError("Must be below 1")
        return value

    def validate_epsilon(self, value):
        if value <= 0.0:
            raise serializers.ValidationError("Must be positive")
        return value

    def validate_dropout_rate(self, value):
        if value >= 1.0:
            raise serializers.ValidationError("Must be below 1")
        return value

    def validate_dataset_root(self, value):
        if not value.strip():
            raise serializers.ValidationError("Dataset root cannot be empty")
        return value
