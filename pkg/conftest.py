"""Configure Django before pytest collects the apps' tests.py modules."""
import os

import django
from django.test.utils import setup_test_environment


def pytest_configure(config):
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "config.settings.dev")
    django.setup()
    setup_test_environment()
