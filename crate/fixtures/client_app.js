// Demo client application. The assertion server holds the SHA-256 of this
// file; any change to it breaks the session-key handshake.
const CLIENT_ID = "UFO_s6Bk8dRkqt3";
const REDIRECT_URI = "https://client.example.org/cb";

export async function startLogin(flow) {
  const assertion = await flow.requestAssertion(CLIENT_ID);
  return flow.pushAuthorization({ clientId: CLIENT_ID, redirectUri: REDIRECT_URI, assertion });
}
