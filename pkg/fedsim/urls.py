from django.urls import path

from .views import (
    ConfigValidateView, ExperimentRunDetailView, ExperimentRunListCreateView,
    ExperimentRunMetricsView, StrategyListView,
)

urlpatterns = [
    path('strategies/', StrategyListView.as_view(), name='strategy_list'),
    path('config/validate/', ConfigValidateView.as_view(), name='config_validate'),

    # Persisted experiment runs
    path('runs/', ExperimentRunListCreateView.as_view(), name='run_list_create'),
    path('runs/<int:pk>/', ExperimentRunDetailView.as_view(), name='run_detail'),
    path('runs/<int:pk>/metrics/', ExperimentRunMetricsView.as_view(), name='run_metrics'),
]
