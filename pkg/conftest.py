import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "agerange.settings")
django.setup()
