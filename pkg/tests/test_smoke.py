def test_imports():
    import nonmarkov_sync.cli  # noqa: F401
    import nonmarkov_sync.settings as settings

    assert settings.LOG_LEVEL == "INFO"
    assert settings.SIGNIFICANT_DIGITS == 12
    assert 0.0 in settings.CONDITION_T_SAMPLES
