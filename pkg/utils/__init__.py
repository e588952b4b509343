"""DeltaMask federated mask fine-tuning simulator"""
