# Package initialization for config module
