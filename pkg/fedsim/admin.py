from django.contrib import admin

from .models import ExperimentRun


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = ('name', 'kind', 'status', 'owner', 'created_at')
    list_filter = ('kind', 'status')
    search_fields = ('name', 'owner__username')
    readonly_fields = ('summary', 'metrics_csv', 'error', 'created_at', 'updated_at')
