from django_filters.rest_framework import DjangoFilterBackend
from drf_yasg import openapi
from drf_yasg.utils import swagger_auto_schema
from rest_framework import viewsets
from rest_framework.decorators import action
from rest_framework.filters import OrderingFilter, SearchFilter
from rest_framework.response import Response

from deer.models import Artifact, Experiment, RunRecord
from deer.pipeline import run_summary
from deer.serializers import ArtifactSerializer, ExperimentSerializer, RunRecordSerializer


class ExperimentViewSet(viewsets.ReadOnlyModelViewSet):
    """
    Experiments registered by the management commands, one per config hash.
    """
    queryset = Experiment.objects.all()
    serializer_class = ExperimentSerializer
    filter_backends = [SearchFilter, OrderingFilter]
    search_fields = ["name", "config_hash"]
    ordering_fields = ["name", "created_at"]

    summary_schema = openapi.Response(
        description="Median and variance of final true returns per cell",
        schema=openapi.Schema(
            type=openapi.TYPE_ARRAY,
            items=openapi.Items(
                type=openapi.TYPE_OBJECT,
                properties={
                    "env": openapi.Schema(type=openapi.TYPE_STRING),
                    "cell": openapi.Schema(type=openapi.TYPE_STRING),
                    "mode": openapi.Schema(type=openapi.TYPE_STRING),
                    "k1": openapi.Schema(type=openapi.TYPE_INTEGER, x_nullable=True),
                    "preset": openapi.Schema(type=openapi.TYPE_STRING),
                    "seeds": openapi.Schema(type=openapi.TYPE_INTEGER),
                    "median": openapi.Schema(type=openapi.TYPE_NUMBER),
                    "variance": openapi.Schema(type=openapi.TYPE_NUMBER),
                },
            ),
        ),
    )

    @swagger_auto_schema(responses={200: summary_schema})
    @action(detail=True, methods=["get"], url_path="summary")
    def summary(self, request, pk=None):
        return Response(run_summary(self.get_object()))


class ArtifactViewSet(viewsets.ReadOnlyModelViewSet):
    queryset = Artifact.objects.select_related("experiment").all()
    serializer_class = ArtifactSerializer
    filter_backends = [DjangoFilterBackend, SearchFilter, OrderingFilter]
    filterset_fields = ["experiment", "kind"]
    search_fields = ["path"]
    ordering_fields = ["kind", "path", "created_at"]


class RunRecordViewSet(viewsets.ReadOnlyModelViewSet):
    queryset = RunRecord.objects.select_related("experiment", "curve").all()
    serializer_class = RunRecordSerializer
    filter_backends = [DjangoFilterBackend, OrderingFilter]
    filterset_fields = ["experiment", "env", "mode", "cell", "seed", "k1", "preset"]
    ordering_fields = ["final_true_return", "final_delivered_return", "seed", "created_at"]
