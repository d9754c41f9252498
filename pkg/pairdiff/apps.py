from django.apps import AppConfig


class PairdiffConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'pairdiff'
    verbose_name = 'Paired image-mask diffusion'

    def ready(self):
        import pairdiff.signals
