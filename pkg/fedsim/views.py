import logging

from django.conf import settings
from django.http import HttpResponse
from rest_framework import generics, status
from rest_framework.permissions import IsAuthenticated
from rest_framework.response import Response
from rest_framework.views import APIView

from .models import ExperimentRun
from .serializers import ConfigTextSerializer, ExperimentRunSerializer
from .utils.client import LOCAL_MODES, WEIGHTING_SCHEMES
from .utils.errors import ConfigurationError, FedSimError
from .utils.harness import check_all_runs, execute_run, run_compare
from .utils.learners import ARCHITECTURES
from .utils.metrics import render_csv
from .utils.numkit import DEFAULT_DURATION_SHAPES
from .utils.runconfig import build_run_config, parse_config_text
from .utils.server import AGGREGATE_MODES, ASYNC_KINDS, STRATEGIES

logger = logging.getLogger(__name__)


def _config_error_response(exc):
    return Response({'error': str(exc), 'details': exc.errors}, status=status.HTTP_400_BAD_REQUEST)


def parse_and_check(text):
    """Parse config text and validate every run it describes (sweep points and compare variants included)."""
    flat = parse_config_text(text, source="request")
    cfg = build_run_config(flat)
    check_all_runs(cfg, flat)
    return flat, cfg


class StrategyListView(APIView):
    """Available strategies, timing models, weighting schemes and architectures"""
    def get(self, request):
        return Response({
            'strategies': {
                kind: {'description': description, 'asynchronous': kind in ASYNC_KINDS}
                for kind, description in STRATEGIES.items()
            },
            'duration_distributions': {
                kind: {'default_shape': shape} for kind, shape in DEFAULT_DURATION_SHAPES.items()
            },
            'weighting_schemes': WEIGHTING_SCHEMES,
            'architectures': ARCHITECTURES,
            'local_modes': list(LOCAL_MODES),
            'aggregate_modes': list(AGGREGATE_MODES),
        })


class ConfigValidateView(APIView):
    """Check a config without running it and return its normalised form"""
    def post(self, request):
        serializer = ConfigTextSerializer(data=request.data)
        if not serializer.is_valid():
            return Response(serializer.errors, status=status.HTTP_400_BAD_REQUEST)
        try:
            _, cfg = parse_and_check(serializer.validated_data['config'])
        except ConfigurationError as exc:
            return _config_error_response(exc)
        return Response({'valid': True, 'config': dict(cfg.flat)})


class ExperimentRunListCreateView(generics.ListCreateAPIView):
    """List the user's runs or launch a new one (runs synchronously, budget capped)"""
    serializer_class = ExperimentRunSerializer
    permission_classes = [IsAuthenticated]

    def get_queryset(self):
        return ExperimentRun.objects.filter(owner=self.request.user)

    def create(self, request, *args, **kwargs):
        serializer = ConfigTextSerializer(data=request.data)
        if not serializer.is_valid():
            return Response(serializer.errors, status=status.HTTP_400_BAD_REQUEST)
        kind = request.data.get('kind', 'run')
        if kind not in dict(ExperimentRun.KIND_CHOICES):
            return Response({'error': f"Invalid kind. Available: {list(dict(ExperimentRun.KIND_CHOICES))}"},
                            status=status.HTTP_400_BAD_REQUEST)

        text = serializer.validated_data['config']
        try:
            flat, cfg = parse_and_check(text)
        except ConfigurationError as exc:
            return _config_error_response(exc)
        cap = getattr(settings, 'FEDSIM_MAX_API_BUDGET', 20000)
        if cfg.sim.budget > cap:
            return Response({'error': f'sim.budget {cfg.sim.budget} exceeds the API limit of {cap} client updates'},
                            status=status.HTTP_400_BAD_REQUEST)

        run = ExperimentRun.objects.create(
            owner=request.user,
            name=serializer.validated_data.get('name', cfg.name),
            kind=kind,
            config=text,
            status='running',
        )
        try:
            if kind == 'compare':
                report = run_compare(cfg, flat, emit=False)
                run.summary = {strategy: result.summary for strategy, result in report.results.items()}
            else:
                result = execute_run(cfg)
                run.summary = result.summary
                run.metrics_csv = render_csv(result.log)
            run.status = 'finished'
        except FedSimError as exc:
            logger.error(f"Run {run.id} failed: {exc}")
            run.status = 'failed'
            run.error = str(exc)
            run.save()
            return Response({'error': f'Simulation failed: {exc}', 'run': ExperimentRunSerializer(run).data},
                            status=status.HTTP_500_INTERNAL_SERVER_ERROR)
        run.save()
        return Response(ExperimentRunSerializer(run).data, status=status.HTTP_201_CREATED)


class ExperimentRunDetailView(generics.RetrieveDestroyAPIView):
    serializer_class = ExperimentRunSerializer
    permission_classes = [IsAuthenticated]

    def get_queryset(self):
        return ExperimentRun.objects.filter(owner=self.request.user)


class ExperimentRunMetricsView(APIView):
    """Eval rows of a finished single run as CSV"""
    permission_classes = [IsAuthenticated]

    def get(self, request, pk):
        try:
            run = ExperimentRun.objects.get(pk=pk, owner=request.user)
        except ExperimentRun.DoesNotExist:
            return Response({'error': 'Run not found'}, status=status.HTTP_404_NOT_FOUND)
        if not run.metrics_csv:
            return Response({'error': 'No metrics recorded for this run'}, status=status.HTTP_404_NOT_FOUND)
        response = HttpResponse(run.metrics_csv, content_type='text/csv')
        response['Content-Disposition'] = f'attachment; filename="{run.name}.csv"'
        return response
