from .gateway import (
    TEMPLATE_IDS,
    ChatGateway,
    ChatRequest,
    CredentialError,
    DimensionError,
    EmbedGateway,
    GatewayStats,
    ProviderConfig,
    ProviderError,
    RateLimiter,
    ResponseCache,
    TransientProviderError,
    TransportError,
)
from .prompts import PromptSet, TemplateError, render_prompt
from .providers import (
    ChatRule,
    OpenAIChatProvider,
    OpenAIEmbedder,
    ScriptError,
    ScriptedChatProvider,
    ScriptedEmbedder,
    make_chat_provider,
    make_embed_provider,
)

__all__ = [
    "TEMPLATE_IDS", "ChatGateway", "ChatRequest", "CredentialError", "DimensionError",
    "EmbedGateway", "GatewayStats", "ProviderConfig", "ProviderError", "RateLimiter",
    "ResponseCache", "TransientProviderError", "TransportError", "PromptSet", "TemplateError",
    "render_prompt", "ChatRule", "OpenAIChatProvider", "OpenAIEmbedder", "ScriptError",
    "ScriptedChatProvider", "ScriptedEmbedder", "make_chat_provider", "make_embed_provider",
]
