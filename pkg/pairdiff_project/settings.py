"""
Django settings for pairdiff_project project.
"""

from pathlib import Path
from decouple import config
import dj_database_url

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = config('SECRET_KEY', default='django-insecure-change-me-in-production')

DEBUG = config('DEBUG', default=True, cast=bool)

ALLOWED_HOSTS = config('ALLOWED_HOSTS', default='localhost,127.0.0.1', cast=lambda v: [s.strip() for s in v.split(',')])

# Application definition
INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'rest_framework',
    'pairdiff',
]

# Database
DATABASES = {
    'default': dj_database_url.config(
        default='sqlite:///' + str(BASE_DIR / 'db.sqlite3')
    )
}

# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = True
USE_TZ = True

# Default primary key field type
DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Logging
PAIRDIFF_LOG_LEVEL = config('PAIRDIFF_LOG_LEVEL', default='INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'pairdiff': {
            'handlers': ['console'],
            'level': PAIRDIFF_LOG_LEVEL,
            'propagate': False,
        },
    },
}

# Paired diffusion pipeline
PAIRDIFF_OUTPUT_ROOT = Path(config('PAIRDIFF_OUTPUT_ROOT', default=str(BASE_DIR / 'runs')))
PAIRDIFF_DEVICE = config('PAIRDIFF_DEVICE', default='cpu')
PAIRDIFF_NUM_WORKERS = config('PAIRDIFF_NUM_WORKERS', default=0, cast=int)
