"""
URL configuration for the fedsim lab project.

    /              status and endpoint map
    /admin/        Django admin (experiment runs)
    /api/auth/     JWT login and refresh
    /api/          strategies, config validation and experiment runs
"""
from django.contrib import admin
from django.http import JsonResponse
from django.urls import include, path
from rest_framework_simplejwt.views import TokenObtainPairView, TokenRefreshView


def api_status(request):
    """Simple API status endpoint for root path"""
    return JsonResponse({
        'status': 'operational',
        'message': 'Federated simulation lab API is running',
        'endpoints': {
            'admin': '/admin/',
            'strategies': '/api/strategies/',
            'config_validation': '/api/config/validate/',
            'experiment_runs': '/api/runs/',
            'user_auth': '/api/auth/'
        },
        'version': '1.0.0'
    })


urlpatterns = [
    path('', api_status, name='api_status'),
    path('admin/', admin.site.urls),
    path('api/auth/login/', TokenObtainPairView.as_view(), name='token_obtain_pair'),
    path('api/auth/token/refresh/', TokenRefreshView.as_view(), name='token_refresh'),
    path('api/', include('fedsim.urls')),
]
