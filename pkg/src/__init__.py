# Package initialization for src module: lgmjoint engine and CLI
