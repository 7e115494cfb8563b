from django.apps import AppConfig


class DeerConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'deer'
    verbose_name = 'Delay-resilient encoder-enhanced RL'
