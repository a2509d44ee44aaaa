import json
import os
from collections import defaultdict


class Item:
    def __init__(self, name, price, quantity=0):
        self.name = name
        self.price = float(price)
        self.quantity = int(quantity)

    def total_value(self):
        return self.price * self.quantity

    def to_dict(self):
        return {"name": self.name, "price": self.price, "quantity": self.quantity}


class Inventory:
    def __init__(self, path=None):
        self.items = {}
        self.path = path
        self.history = defaultdict(list)

    def add(self, name, price, quantity=1):
        if name in self.items:
            self.items[name].quantity += quantity
        else:
            self.items[name] = Item(name, price, quantity)
        self.history[name].append(("add", quantity))
        return self.items[name]

    def remove(self, name, quantity=1):
        item = self.items.get(name)
        if item is None:
            raise KeyError(name)
        if item.quantity < quantity:
            raise ValueError("not enough %s in stock: %d < %d" % (name, item.quantity, quantity))
        item.quantity -= quantity
        self.history[name].append(("remove", quantity))
        if item.quantity == 0:
            del self.items[name]
        return item

    def value(self):
        return sum(item.total_value() for item in self.items.values())

    def cheapest(self, limit=3):
        ranked = sorted(self.items.values(), key=lambda item: (item.price, item.name))
        return [item.name for item in ranked[:limit]]

    def save(self):
        if not self.path:
            return False
        with open(self.path, "w") as handle:
            json.dump([item.to_dict() for item in self.items.values()], handle, indent=2)
        return True

    def load(self):
        if not self.path or not os.path.exists(self.path):
            return 0
        with open(self.path) as handle:
            records = json.load(handle)
        for record in records:
            self.add(record["name"], record["price"], record["quantity"])
        return len(records)
