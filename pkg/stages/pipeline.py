"""FIFO worker shared by the mapping and loop-closing stages."""
import logging
import queue
import threading
from contextlib import nullcontext
from typing import List, Optional, Tuple

from stages.timing import StageTimer

logger = logging.getLogger(__name__)


class PipelineStage:
    """Keyframe ids in, `process(kf_id)` per item on a worker thread.

    Without `start()` nothing runs in the background and the owner calls `process` itself,
    which is how the deterministic single-context mode drives the stages. A `downstream`
    stage receives every keyframe id once this stage is done with it.
    """

    name = "stage"

    def __init__(self, timer: Optional[StageTimer] = None):
        self.timer = timer
        self.downstream: Optional["PipelineStage"] = None
        self.queue: "queue.Queue[Optional[int]]" = queue.Queue()
        self._thread: Optional[threading.Thread] = None
        self._resume = threading.Event()
        self._resume.set()
        self._paused = threading.Event()
        self.failures: List[Tuple[int, str]] = []  # (keyframe id, error) for every failed process call

    def process(self, kf_id: int):
        raise NotImplementedError

    def _measure(self, category: str):
        return self.timer.measure(category) if self.timer is not None else nullcontext()

    @property
    def running(self) -> bool:
        return self._thread is not None

    def insert_keyframe(self, kf_id: int) -> None:
        self.queue.put(kf_id)

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name=self.name, daemon=True)
        self._thread.start()

    def _run(self) -> None:
        while True:
            if not self._resume.is_set():
                self._paused.set()
                self._resume.wait()
                self._paused.clear()
            try:
                kf_id = self.queue.get(timeout=0.01)
            except queue.Empty:
                continue
            try:
                if kf_id is None:
                    return
                self.process(kf_id)
                if self.downstream is not None:
                    self.downstream.insert_keyframe(kf_id)
            except Exception as e:
                logger.exception("%s failed on keyframe %s", self.name, kf_id)
                self.failures.append((kf_id, f"{type(e).__name__}: {e}"))
            finally:
                self.queue.task_done()

    def request_stop(self, timeout: float = 30.0) -> bool:
        """Park the stage after the keyframe in progress; True once it is parked."""
        if self._thread is None:
            return True
        self._resume.clear()
        return self._paused.wait(timeout)

    def release(self) -> None:
        self._resume.set()

    def wait_idle(self) -> None:
        """Block until every queued keyframe has been processed."""
        if self._thread is not None:
            self.queue.join()

    def shutdown(self) -> None:
        if self._thread is None:
            return
        self.release()
        self.queue.put(None)
        self._thread.join()
        self._thread = None
