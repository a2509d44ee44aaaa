import heapq
import time
import logging

logger = logging.getLogger(__name__)


class Task:
    def __init__(self, name, priority=0, deadline=None):
        self.name = name
        self.priority = priority
        self.deadline = deadline
        self.done = False

    def __lt__(self, other):
        return (self.priority, self.name) < (other.priority, other.name)


class Scheduler:
    def __init__(self, clock=time.monotonic):
        self.queue = []
        self.clock = clock
        self.completed = []

    def submit(self, task):
        heapq.heappush(self.queue, task)
        logger.debug("submitted %s with priority %d", task.name, task.priority)

    def pending(self):
        return len(self.queue)

    def next_task(self):
        while self.queue:
            task = heapq.heappop(self.queue)
            if task.deadline is not None and task.deadline < self.clock():
                logger.warning("task %s missed its deadline", task.name)
                continue
            return task
        return None

    def run(self, handler, limit=None):
        count = 0
        while limit is None or count < limit:
            task = self.next_task()
            if task is None:
                break
            try:
                handler(task)
                task.done = True
            except Exception as exc:
                logger.error("task %s failed: %s", task.name, exc)
            self.completed.append(task)
            count += 1
        return count

    def stats(self):
        ok = [t for t in self.completed if t.done]
        failed = [t for t in self.completed if not t.done]
        return {"ok": len(ok), "failed": len(failed), "pending": self.pending()}
