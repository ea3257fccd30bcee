from django.apps import AppConfig


class EstimatorConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'estimator'
    verbose_name = 'Age range estimator'
