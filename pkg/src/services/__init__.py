# Package initialization for services module: parsing, assembly, inference, summaries, prediction, oracles
