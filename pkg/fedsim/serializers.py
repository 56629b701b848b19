import math

from rest_framework import serializers

from .models import ExperimentRun
from .utils.client import LOCAL_MODES, WEIGHTING_SCHEMES
from .utils.learners import ARCHITECTURES
from .utils.numkit import DURATION_KINDS
from .utils.server import AGGREGATE_MODES, STRATEGIES, SYNC_KINDS


def _finite(value):
    if not math.isfinite(value):
        raise serializers.ValidationError("Must be a finite number")
    return value


class FederationSpecSerializer(serializers.Serializer):
    """Where the client datasets come from: the synthetic generator or a CSV file"""

    source = serializers.ChoiceField(choices=['synthetic', 'csv'], default='synthetic')
    num_clients = serializers.IntegerField(min_value=1, default=100)
    feature_dim = serializers.IntegerField(min_value=1, default=16)
    num_classes = serializers.IntegerField(min_value=2, default=2)
    label_skew_alpha = serializers.FloatField(default=0.5)
    size_lognormal_sigma = serializers.FloatField(min_value=0.0, default=1.0)
    mean_examples_per_client = serializers.IntegerField(min_value=1, default=50)
    class_separation = serializers.FloatField(default=2.0)
    seed = serializers.IntegerField(min_value=0, max_value=2 ** 64 - 1, default=0)

    # CSV ingestion
    csv_path = serializers.CharField(required=False)
    csv_features = serializers.CharField(required=False, help_text="Comma-separated feature column names")
    csv_label = serializers.CharField(default='label')
    csv_client = serializers.CharField(default='client')

    def validate_label_skew_alpha(self, value):
        if not value > 0:
            raise serializers.ValidationError("Dirichlet concentration must be positive")
        return _finite(value)

    def validate_class_separation(self, value):
        return _finite(value)

    def validate_csv_features(self, value):
        columns = [column.strip() for column in value.split(',') if column.strip()]
        if not columns:
            raise serializers.ValidationError("At least one feature column is required")
        return columns

    def validate(self, data):
        if data['source'] == 'csv':
            missing = [name for name in ('csv_path', 'csv_features') if not data.get(name)]
            if missing:
                raise serializers.ValidationError({name: "Required when source=csv" for name in missing})
        elif data['num_classes'] > data['feature_dim']:
            raise serializers.ValidationError({
                'num_classes': f"Synthetic federations need num_classes <= feature_dim ({data['feature_dim']})"
            })
        return data


class ModelSpecSerializer(serializers.Serializer):
    kind = serializers.ChoiceField(choices=list(ARCHITECTURES), default='logistic')
    hidden = serializers.IntegerField(min_value=1, default=32)


class SimConfigSerializer(serializers.Serializer):
    """Event engine settings; ``budget`` falls back to FEDSIM_DEFAULT_BUDGET"""

    concurrency = serializers.IntegerField(min_value=1, default=10)
    duration = serializers.ChoiceField(choices=list(DURATION_KINDS), default='half_normal')
    duration_shape = serializers.FloatField(required=False, allow_null=True, default=None)
    normalize_mean = serializers.BooleanField(default=True)
    budget = serializers.IntegerField(min_value=0, required=False, allow_null=True, default=None)
    tau_max = serializers.IntegerField(min_value=0, required=False, allow_null=True, default=None)
    overselection_factor = serializers.FloatField(min_value=1.0, default=1.0)
    eval_every = serializers.FloatField(default=1.0)
    eval_every_steps = serializers.IntegerField(min_value=0, default=0)
    start_stagger = serializers.FloatField(min_value=0.0, default=0.0)
    duration_scales_with_data = serializers.BooleanField(default=False)
    seed = serializers.IntegerField(min_value=0, max_value=2 ** 64 - 1, default=0)

    def validate_duration_shape(self, value):
        if value is not None and not (value > 0 and math.isfinite(value)):
            raise serializers.ValidationError("Duration shape parameter must be positive")
        return value

    def validate_eval_every(self, value):
        if not value > 0:
            raise serializers.ValidationError("Must be positive")
        return _finite(value)

    def validate_overselection_factor(self, value):
        return _finite(value)


class StrategyConfigSerializer(serializers.Serializer):
    kind = serializers.ChoiceField(choices=list(STRATEGIES), default='fedbuff')
    buffer_size = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)
    eta_global = serializers.FloatField(default=1.0)
    momentum = serializers.FloatField(min_value=0.0, default=0.0)
    staleness_alpha = serializers.FloatField(min_value=0.0, default=0.5)
    aggregate_mode = serializers.ChoiceField(choices=list(AGGREGATE_MODES), default='sum')

    def validate_eta_global(self, value):
        if not value > 0:
            raise serializers.ValidationError("Server learning rate must be positive")
        return _finite(value)

    def validate_momentum(self, value):
        if value >= 1.0:
            raise serializers.ValidationError("Momentum must lie in [0, 1)")
        return value

    def validate(self, data):
        if data['momentum'] > 0 and data['kind'] != 'fedavgm':
            raise serializers.ValidationError({'momentum': "Server momentum is only used by fedavgm"})
        return data


class LocalConfigSerializer(serializers.Serializer):
    eta_local = serializers.FloatField(default=0.1)
    batch_size = serializers.IntegerField(min_value=1, default=32)
    mode = serializers.ChoiceField(choices=list(LOCAL_MODES), default='one_epoch')
    local_steps = serializers.IntegerField(min_value=1, default=1)
    lr_norm_enabled = serializers.BooleanField(default=True)
    weighting = serializers.ChoiceField(choices=list(WEIGHTING_SCHEMES), default='lr_norm')
    prox_mu = serializers.FloatField(min_value=0.0, default=0.0)

    def validate_eta_local(self, value):
        if not value > 0:
            raise serializers.ValidationError("Local learning rate must be positive")
        return _finite(value)


class RunSectionSerializer(serializers.Serializer):
    name = serializers.SlugField(default='run')
    target_accuracy = serializers.FloatField(default=0.8)
    eval_fraction = serializers.FloatField(default=0.1)
    output_dir = serializers.CharField(required=False, allow_null=True, default=None)
    save_checkpoint = serializers.BooleanField(default=False)

    def validate_target_accuracy(self, value):
        if not 0.0 < value < 1.0:
            raise serializers.ValidationError("Target accuracy must lie in (0, 1)")
        return value

    def validate_eval_fraction(self, value):
        if not 0.0 < value < 1.0:
            raise serializers.ValidationError("Eval fraction must lie in (0, 1)")
        return value


class RunConfigSerializer(serializers.Serializer):
    """All sections of one run plus the rules that span sections"""

    federation = FederationSpecSerializer()
    model = ModelSpecSerializer()
    sim = SimConfigSerializer()
    strategy = StrategyConfigSerializer()
    local = LocalConfigSerializer()
    run = RunSectionSerializer()

    def validate(self, data):
        sim, strategy, local, federation = data['sim'], data['strategy'], data['local'], data['federation']
        errors = {}
        is_sync = strategy['kind'] in SYNC_KINDS

        if sim['overselection_factor'] != 1.0 and not is_sync:
            errors['sim.overselection_factor'] = "Over-selection only applies to synchronous strategies"
        if local['prox_mu'] > 0 and strategy['kind'] != 'fedprox':
            errors['local.prox_mu'] = "The proximal term is only used by fedprox"
        if is_sync and strategy.get('buffer_size') not in (None, sim['concurrency']):
            errors['strategy.buffer_size'] = "Synchronous strategies aggregate the whole cohort (buffer_size = sim.concurrency)"
        if federation['source'] == 'synthetic':
            needed = math.ceil(sim['overselection_factor'] * sim['concurrency'] - 1e-9)
            if needed > federation['num_clients']:
                errors['sim.concurrency'] = (
                    f"{needed} clients must train at once but the federation has {federation['num_clients']}"
                )
        if errors:
            raise serializers.ValidationError(errors)
        return data


class ConfigTextSerializer(serializers.Serializer):
    """Request body of the validate and launch endpoints"""

    config = serializers.CharField(trim_whitespace=False)
    name = serializers.SlugField(required=False)


class ExperimentRunSerializer(serializers.ModelSerializer):
    owner = serializers.CharField(source='owner.username', read_only=True)

    class Meta:
        model = ExperimentRun
        fields = [
            'id', 'owner', 'name', 'kind', 'config', 'status', 'summary',
            'error', 'created_at', 'updated_at',
        ]
        read_only_fields = fields
