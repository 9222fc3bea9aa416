from django.db import models


class ExperimentRun(models.Model):
    """Her CLI çalıştırmasının kaydı (run ledger)."""

    SUBCOMMAND_CHOICES = (
        ('simulate', 'Simulate'),
        ('sample', 'Sample'),
        ('train', 'Train'),
        ('evaluate', 'Evaluate'),
        ('bench', 'Bench'),
        ('verify_adjoint', 'Verify Adjoint'),
    )
    STATUS_CHOICES = (
        ('running', 'Çalışıyor'),
        ('succeeded', 'Başarılı'),
        ('failed', 'Başarısız'),
    )

    subcommand = models.CharField(max_length=20, choices=SUBCOMMAND_CHOICES)
    status = models.CharField(max_length=10, choices=STATUS_CHOICES, default='running')
    config_hash = models.CharField(max_length=64, help_text="sha256 of the canonical JSON of the validated config")
    seed = models.BigIntegerField(default=0)
    output_dir = models.CharField(max_length=500)
    exit_code = models.IntegerField(null=True, blank=True)
    error = models.JSONField(null=True, blank=True, help_text="Uniform error payload when the run failed")
    created_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    def __str__(self):
        return f"{self.subcommand} #{self.id} - {self.status}"

    class Meta:
        ordering = ['-created_at']
