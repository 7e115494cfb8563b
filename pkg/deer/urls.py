from django.urls import include, path
from rest_framework import routers
from . import views

router = routers.DefaultRouter()
router.register(r'experiments', views.ExperimentViewSet)
router.register(r'artifacts', views.ArtifactViewSet, basename='artifact')
router.register(r'runs', views.RunRecordViewSet, basename='run')
urlpatterns = [
    path('', include(router.urls)),
]
