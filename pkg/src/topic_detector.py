import asyncio
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import httpx
from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from errors import RemoteDetectorUnavailable

load_dotenv()

DETECTOR_URL_ENV = "ENGAGE_TOPIC_DETECTOR_URL"


@dataclass
class DetectorConfig:
    url: str
    timeout: float = 10.0
    max_in_flight: int = 8


class DetectRequest(BaseModel):
    session_id: str
    prompts: List[str]


class DetectResponse(BaseModel):
    boundaries: List[int]


def resolve_detector_url(configured: Optional[str]) -> Optional[str]:
    return os.getenv(DETECTOR_URL_ENV) or configured


class RemoteTopicDetector:
    def __init__(self, config: DetectorConfig):
        self.config = config

    def _client(self) -> httpx.AsyncClient:
        return httpx.AsyncClient(timeout=self.config.timeout)

    # Connection hiccups get retried; timeouts and non-2xx go straight to fallback.
    @retry(
        stop=stop_after_attempt(3),
        wait=wait_exponential(multiplier=0.5, min=0.5, max=4),
        retry=retry_if_exception_type((httpx.ConnectError, httpx.RemoteProtocolError)),
        reraise=True,
    )
    async def _post(self, client: httpx.AsyncClient, request: DetectRequest) -> DetectResponse:
        response = await client.post(self.config.url, json=request.model_dump())
        response.raise_for_status()
        return DetectResponse.model_validate(response.json())

    async def detect_async(self, client: httpx.AsyncClient, session_id: str, texts: Sequence[str]) -> List[int]:
        try:
            reply = await self._post(client, DetectRequest(session_id=session_id, prompts=list(texts)))
        except (httpx.HTTPError, ValidationError, ValueError) as e:
            raise RemoteDetectorUnavailable(f"{self.config.url}: {type(e).__name__}: {e}") from e
        return reply.boundaries

    async def detect_many_async(self, requests: Dict[str, List[str]]) -> Dict[str, Optional[List[int]]]:
        gate = asyncio.Semaphore(self.config.max_in_flight)

        async def one(client: httpx.AsyncClient, key: str, texts: List[str]) -> Optional[List[int]]:
            async with gate:
                try:
                    return await self.detect_async(client, key, texts)
                except RemoteDetectorUnavailable:
                    return None

        async with self._client() as client:
            keys = list(requests)
            answers = await asyncio.gather(*(one(client, k, requests[k]) for k in keys))
        return dict(zip(keys, answers))

    def detect_many(self, requests: Dict[str, List[str]]) -> Dict[str, Optional[List[int]]]:
        if not requests:
            return {}
        return asyncio.run(self.detect_many_async(requests))

    def detect(self, session_id: str, texts: Sequence[str]) -> List[int]:
        async def run() -> List[int]:
            async with self._client() as client:
                return await self.detect_async(client, session_id, texts)

        return asyncio.run(run())
