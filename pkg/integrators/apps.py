from django.apps import AppConfig


class IntegratorsConfig(AppConfig):
    name = "integrators"
