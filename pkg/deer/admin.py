from django.contrib import admin

from .models import Artifact, Experiment, RunRecord


@admin.register(Experiment)
class ExperimentAdmin(admin.ModelAdmin):
    list_display = ["name", "config_hash", "created_at"]
    search_fields = ["name", "config_hash"]


@admin.register(Artifact)
class ArtifactAdmin(admin.ModelAdmin):
    list_display = ["path", "kind", "experiment", "created_at"]
    list_filter = ["kind"]


admin.site.register(RunRecord)
