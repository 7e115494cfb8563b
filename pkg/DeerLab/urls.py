"""
URL configuration for DeerLab project.

The API is read-only: experiments, artifacts and runs are written by the
management commands (`manage.py collect|pretrain|train|eval|report`).
"""
from django.contrib import admin
from django.urls import path, include
from rest_framework import permissions
from drf_yasg.views import get_schema_view
from drf_yasg import openapi


schema_view = get_schema_view(
    openapi.Info(
        title="DEER experiment registry",
        default_version="v1",
        description="Datasets, encoder checkpoints, learning curves and reports of delay-resilient RL experiments",
        license=openapi.License(name="BSD License"),
    ),
    public=True,
    permission_classes=(permissions.AllowAny,),
)


urlpatterns = [
    path('api/', include("deer.urls")),
    path('admin/', admin.site.urls),
    path('api-auth/', include('rest_framework.urls')),
    path("", schema_view.with_ui("swagger", cache_timeout=0), name="schema-swagger-ui"),
]
