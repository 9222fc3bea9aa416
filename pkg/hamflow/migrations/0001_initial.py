from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('subcommand', models.CharField(choices=[('simulate', 'Simulate'), ('sample', 'Sample'), ('train', 'Train'), ('evaluate', 'Evaluate'), ('bench', 'Bench'), ('verify_adjoint', 'Verify Adjoint')], max_length=20)),
                ('status', models.CharField(choices=[('running', 'Çalışıyor'), ('succeeded', 'Başarılı'), ('failed', 'Başarısız')], default='running', max_length=10)),
                ('config_hash', models.CharField(help_text='sha256 of the canonical JSON of the validated config', max_length=64)),
                ('seed', models.BigIntegerField(default=0)),
                ('output_dir', models.CharField(max_length=500)),
                ('exit_code', models.IntegerField(blank=True, null=True)),
                ('error', models.JSONField(blank=True, help_text='Uniform error payload when the run failed', null=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
    ]
