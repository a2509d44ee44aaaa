import json
from collections import defaultdict


class Ledger:
    def __init__(self, owner):
        self.owner = owner
        self.entries = []
        self.balances = defaultdict(int)

    def record(self, account, amount, note=""):
        if amount == 0:
            raise ValueError("amount must be non-zero")
        entry = {"account": account, "amount": amount, "note": note}
        self.entries.append(entry)
        self.balances[account] += amount
        return entry

    def balance(self, account):
        return self.balances.get(account, 0)

    def transfer(self, source, target, amount):
        if amount <= 0:
            raise ValueError("transfer must be positive")
        if self.balance(source) < amount:
            raise RuntimeError("insufficient funds")
        self.record(source, -amount, "transfer out")
        self.record(target, amount, "transfer in")

    def history(self, account):
        return [e for e in self.entries if e["account"] == account]

    def total(self):
        return sum(self.balances.values())

    def to_json(self):
        return json.dumps({"owner": self.owner, "entries": self.entries})


def load_ledger(text):
    data = json.loads(text)
    ledger = Ledger(data["owner"])
    for entry in data["entries"]:
        ledger.record(entry["account"], entry["amount"], entry.get("note", ""))
    return ledger
