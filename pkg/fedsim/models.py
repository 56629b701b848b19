from django.contrib.auth import get_user_model
from django.db import models

User = get_user_model()


class ExperimentRun(models.Model):
    """A simulation launched through the API, with the summary it produced"""

    KIND_CHOICES = [
        ('run', 'Single run'),
        ('compare', 'Strategy comparison'),
    ]
    STATUS_CHOICES = [
        ('pending', 'Pending'),
        ('running', 'Running'),
        ('finished', 'Finished'),
        ('failed', 'Failed'),
    ]

    owner = models.ForeignKey(User, on_delete=models.CASCADE, related_name='experiment_runs')
    name = models.SlugField(max_length=100)
    kind = models.CharField(max_length=20, choices=KIND_CHOICES, default='run')
    config = models.TextField(help_text="Flat section.key=value config text as submitted")
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='pending')

    # Results
    summary = models.JSONField(null=True, blank=True, help_text="Targets, final accuracy and staleness histogram")
    metrics_csv = models.TextField(blank=True, help_text="Eval rows in the same CSV format the CLI writes")
    error = models.TextField(blank=True)

    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.name} ({self.kind}, {self.status})"
