"""Configure Django before pytest imports the apps' tests.py modules."""
import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "config.settings")
django.setup()
